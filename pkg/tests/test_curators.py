import filecmp
import json

import numpy as np
import pytest
import requests

from layerforge.core import composite_on_white
from layerforge.curators.mock import (
    Fault,
    MockAgent,
    MockEditor,
    MockServer,
    RuleVerifier,
    ThresholdSegmenter,
    find_entities,
    make_scene,
    mock_services,
)
from layerforge.curators.pipeline import (
    AuditLog,
    PipelineConfig,
    curate_backgrounds,
    curate_foregrounds,
    curate_layered,
    derive_seed,
    run_batch,
    run_pipeline,
)
from layerforge.curators.services import (
    HttpEditor,
    ServiceError,
    ToolEndpoints,
    http_services,
    request_id_for,
    sample_from_wire,
    sample_to_wire,
)
from layerforge.dataset import iter_manifests, read_sample, write_image
from layerforge.selector import ChromaLayoutEmbedder, SelectorConfig, select_proposals


# -- scripted fakes ----------------------------------------------------------------

class ScriptedAgent:
    """Reports a foreground while the image is one of the scripted frames."""

    def __init__(self, frames):
        self.frames = frames

    def _index(self, image):
        for i, f in enumerate(self.frames):
            if np.array_equal(f, image):
                return i
        return None

    def detect_foreground(self, image):
        i = self._index(image)
        present = i is not None and i < len(self.frames) - 1
        return {"present": present, "description": f"thing {i}" if present else ""}

    def removal_instruction(self, image, description):
        return f"remove {description}"

    def background_removal_instruction(self, image, description):
        return f"keep {description}"


class ScriptedEditor:
    def __init__(self, frames, crops=None):
        self.frames, self.crops = frames, crops or {}

    def apply(self, image, instruction):
        verb, _, desc = instruction.partition(" ")
        i = int(desc.split()[-1])
        return self.frames[i + 1] if verb == "remove" else self.crops[i]


class FixedSegmenter:
    def __init__(self, masks):
        self.masks = list(masks)
        self.calls = 0

    def segment(self, image):
        m = self.masks[min(self.calls, len(self.masks) - 1)]
        self.calls += 1
        if isinstance(m, Exception):
            raise m
        return m


class AcceptAll:
    def verify(self, rendered, sample):
        return {"accept": True, "reasons": []}


class CoverageVerifier:
    def __init__(self, c):
        self.c = c

    def verify(self, rendered, sample):
        ok = all(l.alpha.mean() >= self.c for l in sample.layers)
        return {"accept": ok, "reasons": [] if ok else ["coverage"]}


class DownVerifier:
    def verify(self, rendered, sample):
        raise ServiceError("verifier", "verify", "connection refused", 3, "rid", "transport")


def frames(rng, n):
    return [rng.random((8, 8, 3)) for _ in range(n + 1)]


# -- background curation -----------------------------------------------------------

def test_bic_scripted_peeling(rng):
    fr = frames(rng, 3)
    audit = AuditLog("x")
    out = curate_backgrounds(fr[0], ScriptedAgent(fr), ScriptedEditor(fr), max_steps=5, audit=audit)
    assert len(out.backgrounds) == 3
    for i in range(3):
        assert np.array_equal(out.backgrounds[i], fr[i + 1])
        assert np.array_equal(out.step_inputs[i], fr[i])
    assert [s["present"] for s in audit.steps] == [True, True, True, False]
    assert audit.warnings == []


def test_bic_no_foreground(rng):
    scene = make_scene(0, n_objects=0)
    audit = AuditLog("x")
    out = curate_backgrounds(scene.image, MockAgent(), MockEditor(), audit=audit)
    assert out.backgrounds == [] and len(audit.steps) == 1


def test_bic_two_objects_with_mocks():
    scene = make_scene(3, n_objects=2)
    out = curate_backgrounds(scene.image, MockAgent(), MockEditor())
    assert len(out.backgrounds) == 2
    assert [len(find_entities(b)) for b in out.backgrounds] == [1, 0]


def test_bic_no_progress_and_step_cap(rng):
    class Stuck:
        def apply(self, image, instruction):
            return np.array(image)

    fr = frames(rng, 3)
    audit = AuditLog("x")
    out = curate_backgrounds(fr[0], ScriptedAgent(fr), Stuck(), audit=audit)
    assert out.backgrounds == [] and audit.steps[0]["no_progress"] and audit.warnings
    audit = AuditLog("y")
    out = curate_backgrounds(fr[0], ScriptedAgent(fr), ScriptedEditor(fr), max_steps=2, audit=audit)
    assert len(out.backgrounds) == 2 and any("step cap" in w for w in audit.warnings)
    with pytest.raises(ValueError):
        curate_backgrounds(fr[0], ScriptedAgent(fr), ScriptedEditor(fr), max_steps=0)


# -- foreground curation -----------------------------------------------------------

def test_fic_single_expert_and_mean_of_three(rng):
    fr = frames(rng, 1)
    crop = rng.random((8, 8, 3))
    m1, m2, m3 = rng.random((8, 8)), rng.random((8, 8)), rng.random((8, 8))
    agent, editor = ScriptedAgent(fr), ScriptedEditor(fr, {0: crop})
    layers = curate_foregrounds(fr[:1], ["thing 0"], agent, editor, [FixedSegmenter([m1])])
    assert np.array_equal(layers[0].alpha, m1) and np.array_equal(layers[0].rgb, crop)
    segs = [FixedSegmenter([m]) for m in (m1, m2, m3)]
    layers = curate_foregrounds(fr[:1], ["thing 0"], agent, editor, segs, workers=3)
    np.testing.assert_allclose(layers[0].alpha, (m1 + m2 + m3) / 3, atol=1e-15)


def test_fic_white_roundtrip_with_exact_editor(rng):
    fr = frames(rng, 1)
    gt_rgb, gt_alpha = rng.random((8, 8, 3)), (rng.random((8, 8)) > 0.5).astype(float)
    crop = composite_on_white(gt_alpha, gt_rgb)
    layers = curate_foregrounds(fr[:1], ["thing 0"], ScriptedAgent(fr), ScriptedEditor(fr, {0: crop}), [FixedSegmenter([gt_alpha])])
    out = composite_on_white(layers[0].alpha, layers[0].rgb)
    assert np.max(np.abs(out - crop)) <= 1e-6


def test_fic_mock_editor_recovers_entity_mask():
    scene = make_scene(4, n_objects=2)
    bic = curate_backgrounds(scene.image, MockAgent(), MockEditor())
    layers = curate_foregrounds(bic.step_inputs, bic.descriptions, MockAgent(), MockEditor(), [ThresholdSegmenter("hard")])
    assert len(layers) == 2
    for got, want in zip(layers, scene.layers):
        assert np.array_equal(got.alpha, want.alpha)


def test_fic_failure_is_recorded_and_others_continue(rng):
    fr = frames(rng, 2)
    crops = {0: rng.random((8, 8, 3)), 1: rng.random((8, 8, 3))}
    seg = FixedSegmenter([ServiceError("segmenter", "segment", "boom", code="injected"), np.ones((8, 8))])
    audit = AuditLog("x")
    layers = curate_foregrounds(fr[:2], ["thing 0", "thing 1"], ScriptedAgent(fr), ScriptedEditor(fr, crops), [seg], audit)
    assert len(layers) == 1
    assert [r["status"] for r in audit.foregrounds] == ["failed", "ok"]
    assert audit.foregrounds[0]["error"]["code"] == "injected"


# -- layered-sample curation -------------------------------------------------------

def scene_pools(seed=5):
    scene = make_scene(seed, n_objects=2)
    bic = curate_backgrounds(scene.image, MockAgent(), MockEditor())
    fgs = curate_foregrounds(bic.step_inputs, bic.descriptions, MockAgent(), MockEditor(), [ThresholdSegmenter(m) for m in ("hard", "soft", "dilated")])
    return scene, bic.backgrounds, fgs


def test_lic_accept_all_matches_selector():
    scene, bgs, fgs = scene_pools()
    phi = ChromaLayoutEmbedder()
    audit = AuditLog("x")
    samples = curate_layered(scene.image, bgs, fgs, phi, SelectorConfig(), AcceptAll(), audit)
    props = select_proposals(scene.image, bgs, fgs, phi, SelectorConfig())
    assert len(samples) == len(props) == len(audit.proposals) > 0
    assert all(p["status"] == "accepted" for p in audit.proposals)
    for s in samples:
        assert s.roundtrip_error() <= 1e-6


def test_lic_coverage_rule_matches_oracle():
    scene, bgs, fgs = scene_pools()
    phi = ChromaLayoutEmbedder()
    c = 0.06
    samples = curate_layered(scene.image, bgs, fgs, phi, SelectorConfig(), CoverageVerifier(c))
    props = select_proposals(scene.image, bgs, fgs, phi, SelectorConfig())
    expected = [p for p in props if all(fgs[i].alpha.mean() >= c for i in p.foreground_ids)]
    assert 0 < len(expected) < len(props)
    assert len(samples) == len(expected)


def test_lic_rule_verifier_end_to_end():
    scene, bgs, fgs = scene_pools()
    audit = AuditLog("x")
    samples = curate_layered(scene.image, bgs, fgs, ChromaLayoutEmbedder(), SelectorConfig(), RuleVerifier(), audit)
    assert len(samples) >= 1
    assert len({(p["source_ref"], p["background_ref"], tuple(p["foreground_ids"])) for p in audit.proposals}) == len(audit.proposals)
    for s in samples:
        assert s.roundtrip_error() <= 1e-6


def test_lic_verifier_outage_marks_pending():
    scene, bgs, fgs = scene_pools()
    audit = AuditLog("x")
    samples = curate_layered(scene.image, bgs, fgs, ChromaLayoutEmbedder(), SelectorConfig(), DownVerifier(), audit)
    assert samples == [] and audit.proposals
    assert all(p["status"] == "pending" for p in audit.proposals)


def test_lic_empty_pools():
    scene = make_scene(0, n_objects=0)
    assert curate_layered(scene.image, [], [], ChromaLayoutEmbedder()) == []


# -- whole pipeline -----------------------------------------------------------------

def scene_dir(path, seeds=(0, 1, 2)):
    path.mkdir(parents=True, exist_ok=True)
    for s in seeds:
        write_image(path / f"scene{s}.png", make_scene(s, n_objects=1 + s % 3).image)
    return path


def tree_files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_run_batch_deterministic(tmp_path):
    inp = scene_dir(tmp_path / "in")
    cfg = PipelineConfig(seed=7)
    a = run_batch(inp, tmp_path / "a", mock_services(), cfg)
    b = run_batch(inp, tmp_path / "b", mock_services(), PipelineConfig(seed=7, workers=3))
    assert all(len(v) >= 1 for v in a.values()) and len(a) == 3
    files = tree_files(tmp_path / "a")
    assert files == tree_files(tmp_path / "b")
    for f in files:
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False), f
    for m in iter_manifests(tmp_path / "a"):
        read_sample(m.path)
        assert m.provenance["seeds"]["run"] == 7
        assert len(m.provenance["degradation_specs"]) == m.layer_count


def test_run_batch_empty_and_bad_images(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run_batch(tmp_path / "empty", tmp_path / "o1", mock_services(), PipelineConfig()) == {}
    inp = scene_dir(tmp_path / "in", seeds=(1,))
    (inp / "broken.png").write_bytes(b"garbage")
    out = run_batch(inp, tmp_path / "o2", mock_services(), PipelineConfig())
    assert out["broken"] == [] and len(out["scene1"]) >= 1
    audit = json.loads((tmp_path / "o2" / "audit" / "broken.json").read_text())
    assert audit["status"] == "failed"


def test_derive_seed_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a") != derive_seed(1, "b")
    assert 0 <= derive_seed(0, "x") < 2**63


# -- wire protocol and loopback services ---------------------------------------------

def test_wire_sample_roundtrip(rng):
    s = make_scene(2).sample
    back = sample_from_wire(json.loads(json.dumps(sample_to_wire(s))))
    assert np.max(np.abs(back.source - s.source)) <= 0.5 / 255 + 1e-12
    assert len(back.layers) == len(s.layers)


def test_request_ids():
    a = request_id_for("editor", "apply", {"x": 1}, 0)
    assert a == request_id_for("editor", "apply", {"x": 1}, 0)
    assert a != request_id_for("editor", "apply", {"x": 1}, 1)
    assert a != request_id_for("editor", "apply", {"x": 2}, 0)


def test_endpoint_validation():
    good = dict(agent_url="http://h/a", editor_url="http://h/e", segmenter_urls=["http://h/s"], embedder_url="http://h/m", verifier_url="http://h/v")
    ToolEndpoints(**good)
    with pytest.raises(ValueError):
        ToolEndpoints(**{**good, "editor_url": "ftp://h/e"})
    with pytest.raises(ValueError):
        ToolEndpoints(**{**good, "segmenter_urls": []})
    with pytest.raises(ValueError):
        ToolEndpoints(**{**good, "agent_url": "http://h:notaport/a"})


def test_server_protocol_shapes():
    with MockServer() as srv:
        r = requests.post(f"{srv.base_url}/agent/detect_foreground", json={"image": sample_to_wire(make_scene(1).sample)["source"]})
        body = r.json()
        assert r.status_code == 200 and body["status"] == "ok" and body["payload"]["present"] is True
        r = requests.post(f"{srv.base_url}/agent/fly", json={})
        assert r.status_code == 404 and r.json()["status"] == "error"
        r = requests.post(f"{srv.base_url}/editor/apply", data=b"{nope", headers={"Content-Type": "application/json"})
        assert r.status_code == 400


def test_http_pipeline_matches_in_process(tmp_path):
    scene = make_scene(3, n_objects=2)
    img_path = tmp_path / "scene.png"
    write_image(img_path, scene.image)
    from layerforge.dataset import read_image

    img = read_image(img_path)
    local = run_pipeline(img, mock_services(), PipelineConfig(seed=1), tmp_path / "local", "s")
    with MockServer() as srv:
        remote = run_pipeline(img, http_services(srv.endpoints()), PipelineConfig(seed=1), tmp_path / "remote", "s")
    assert len(local) >= 1
    assert [m.provenance["proposal"]["foreground_ids"] for m in remote] == [m.provenance["proposal"]["foreground_ids"] for m in local]


def test_editor_outage_retries_then_fails(tmp_path):
    img = make_scene(3).image
    with MockServer(faults={"editor": Fault("http503", -1)}) as srv:
        out = run_pipeline(img, http_services(srv.endpoints(retries=2)), PipelineConfig(seed=2), tmp_path, "s")
        assert out == []
        assert srv.hits["editor"] == 3
        assert len(set(srv.request_ids["editor"])) == 1
    audit = json.loads((tmp_path / "audit" / "s.json").read_text())
    assert audit["status"] == "failed"
    err = audit["errors"][0]
    assert err["code"] == "http_503" and err["attempts"] == 3 and err["service"] == "editor"
    assert not list(tmp_path.glob("s_*"))


def test_transient_fault_recovers_with_same_output(tmp_path):
    img = make_scene(3).image
    with MockServer() as srv:
        clean = run_pipeline(img, http_services(srv.endpoints()), PipelineConfig(seed=2), tmp_path / "a", "s")
    with MockServer(faults={"editor": Fault("http500", 1), "verifier": Fault("drop", 1)}) as srv:
        flaky = run_pipeline(img, http_services(srv.endpoints(retries=2)), PipelineConfig(seed=2), tmp_path / "b", "s")
        ids = srv.request_ids["editor"]
        assert ids[0] == ids[1]
    def strip(m):
        # service ids embed the server port, which differs between the two servers
        d = m.to_dict()
        d["provenance"].pop("services")
        return d

    assert [strip(m) for m in clean] == [strip(m) for m in flaky]
    assert len(clean) >= 1


def test_structured_error_is_not_retried():
    with MockServer(faults={"editor": Fault("error", -1)}) as srv:
        ed = HttpEditor(srv.endpoints().editor_url, retries=3, backoff=0.0)
        with pytest.raises(ServiceError) as info:
            ed.apply(np.ones((4, 4, 3)), "anything")
        assert info.value.attempts == 1 and info.value.code == "injected"
        assert srv.hits["editor"] == 1


def test_unreachable_service_is_transport_error():
    with MockServer() as srv:
        url = srv.endpoints().editor_url
    ed = HttpEditor(url, retries=1, backoff=0.0, timeout=1.0)
    with pytest.raises(ServiceError) as info:
        ed.apply(np.ones((4, 4, 3)), "anything")
    assert info.value.code == "transport" and info.value.attempts == 2
