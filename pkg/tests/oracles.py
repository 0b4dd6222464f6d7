"""Slow, independent reference implementations shared by the test modules."""

import itertools

import numpy as np

from layerforge.core import ForegroundLayer


def unit(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    n = np.sqrt(np.sum(v * v))
    return v / n if n > 0 else v


def cos(u, v):
    return float(np.sum(unit(u) * unit(v)))


def white_view(alpha, x):
    return x * alpha[:, :, None] + (1.0 - alpha[:, :, None])


def stack_back_to_front(bg, layers_front_first):
    out = np.array(bg, dtype=np.float64)
    for layer in reversed(layers_front_first):
        a = layer.alpha[:, :, None]
        out = layer.rgb * a + out * (1.0 - a)
    return out


def brute_select(source, backgrounds, foregrounds, phi, tau_local, tau_global):
    """Reference proposal search: bitmask subsets, every source and background."""
    k = len(foregrounds)
    f_ff = [[phi(white_view(fi.alpha, fj.rgb)) for fj in foregrounds] for fi in foregrounds]
    f_fb = [[phi(white_view(fi.alpha, b)) for b in backgrounds] for fi in foregrounds]
    subsets = []
    for bits in range(1, 2**k):
        sub = [i for i in range(k) if bits >> i & 1]
        if all(cos(f_ff[i][i], f_ff[i][j]) <= tau_local for i in sub for j in sub if i < j):
            subsets.append(tuple(sub))
    found = {}
    sources = [("image", source)] + [(f"bg{j}", b) for j, b in enumerate(backgrounds)]
    for ref, img in sources:
        for j, bg in enumerate(backgrounds):
            if f"bg{j}" == ref:
                continue
            for sub in subsets:
                if any(cos(f_ff[i][i], f_fb[i][j]) > tau_local for i in sub):
                    continue
                score = cos(phi(stack_back_to_front(bg, [foregrounds[i] for i in sub])), phi(img))
                if score >= tau_global:
                    found[(ref, f"bg{j}", sub)] = score
    return found


def selector_scene(seed, k, n_bg, size=16):
    """Small random scene with planted duplicates so every constraint fires sometimes."""
    rng = np.random.default_rng(seed)
    base = np.clip(rng.random((1, 1, 3)) * 0.4 + 0.5 + rng.normal(0, 0.03, (size, size, 3)), 0, 1)
    fgs = []
    for _ in range(k):
        if fgs and rng.random() < 0.25:
            prev = fgs[int(rng.integers(len(fgs)))]
            fgs.append(ForegroundLayer(prev.rgb.copy(), prev.alpha.copy()))
            continue
        y0, x0 = rng.integers(0, size - 4, 2)
        h, w = rng.integers(3, size // 2 + 1, 2)
        alpha = np.zeros((size, size))
        alpha[y0 : y0 + h, x0 : x0 + w] = 1.0
        if rng.random() < 0.5:
            alpha = np.clip(alpha * rng.uniform(0.6, 1.0, (size, size)), 0, 1)
        color = rng.random(3)
        rgb = np.clip(color + rng.normal(0, 0.05, (size, size, 3)), 0, 1)
        fgs.append(ForegroundLayer(rgb, alpha))
    image = stack_back_to_front(base, fgs)
    bgs = []
    for _ in range(n_bg):
        r = rng.random()
        if r < 0.4:
            bgs.append(base.copy())
        elif r < 0.7:
            drop = int(rng.integers(k))
            bgs.append(stack_back_to_front(base, [f for i, f in enumerate(fgs) if i != drop]))
        elif r < 0.85:
            bgs.append(image.copy())
        else:
            bgs.append(rng.random((size, size, 3)))
    return image, bgs, fgs


def all_edit_sets(n, e):
    for size in range(min(n, e) + 1):
        yield from itertools.combinations(range(n), size)


def brute_matching(pred_alphas, gt_alphas):
    """Best total soft IoU over every injective assignment, computed pixel-wise."""

    def iou(a, b):
        den = np.maximum(a, b).sum()
        return 1.0 if den == 0 else np.minimum(a, b).sum() / den

    n_p, n_g = len(pred_alphas), len(gt_alphas)
    best = 0.0
    if n_p <= n_g:
        for perm in itertools.permutations(range(n_g), n_p):
            best = max(best, sum(iou(pred_alphas[i], gt_alphas[perm[i]]) for i in range(n_p)))
    else:
        for perm in itertools.permutations(range(n_p), n_g):
            best = max(best, sum(iou(pred_alphas[perm[g]], gt_alphas[g]) for g in range(n_g)))
    return best


def corrupt(gt, rng):
    """A plausible wrong prediction: drop, perturb, recolor or add layers."""
    from layerforge.core import LayeredSample

    layers = []
    for layer in gt.layers:
        r = rng.random()
        if r < 0.2 and len(gt.layers) > 1:
            continue
        alpha, rgb = layer.alpha, layer.rgb
        if r < 0.6:
            alpha = np.clip(alpha + rng.normal(0, 0.3, alpha.shape), 0, 1)
        elif r < 0.8:
            rgb = rng.random(rgb.shape)
        layers.append(ForegroundLayer(rgb, alpha))
    if rng.random() < 0.3:
        h, w = gt.shape
        layers.append(ForegroundLayer(rng.random((h, w, 3)), rng.random((h, w))))
    if not layers:
        layers.append(ForegroundLayer(gt.layers[0].rgb, np.zeros(gt.shape)))
    rng.shuffle(layers)
    layers = [ForegroundLayer(f.rgb, f.alpha, k) for k, f in enumerate(layers, start=1)]
    bg = gt.background if rng.random() < 0.5 else np.clip(gt.background + rng.normal(0, 0.1, gt.background.shape), 0, 1)
    return LayeredSample(gt.source, bg, layers)


def disk_scan(mask, r, pick):
    """Brute-force disk min/max: scan every offset, clamp coordinates into the frame."""
    h, w = mask.shape
    out = np.empty_like(mask)
    for y in range(h):
        for x in range(w):
            vals = []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy * dy + dx * dx <= r * r:
                        yy = min(max(y + dy, 0), h - 1)
                        xx = min(max(x + dx, 0), w - 1)
                        vals.append(mask[yy, xx])
            out[y, x] = pick(vals)
    return out


def mask_oracle(groups):
    """Token-by-token rule evaluation."""
    owner = [g for g in groups for _ in range(g.token_count)]
    n = len(owner)
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            q, k = owner[i], owner[j]
            if q.role == "degraded":
                out[i, j] = k is q or k.role == "source"
            else:
                out[i, j] = k.role != "degraded"
    return out
