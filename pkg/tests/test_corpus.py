import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierdx.config import DATA_DIR
from hierdx.corpus import (
    CorpusError,
    DiagnosticCase,
    Trajectory,
    load_cases,
    read_jsonl,
    render_sft,
    synth_type1,
    synth_type2,
    synth_type3,
    synthesize,
    synthetic_cases,
    write_jsonl,
)
from hierdx.generation import ChatCompletionGenerator, GenerationError, TemplateGenerator
from hierdx.taxonomy import DdxGraph, TaxonomyTree

SK_RULE = "Presence of a well-demarcated, stuck-on appearance indicates seborrheic keratosis."
MEL_RULE = "Presence of asymmetry and multiple colours indicates melanoma."


def case(cid, diagnosis, rule=None):
    return DiagnosticCase(cid, f"images/{cid}.jpg", rule or f"Features indicate {diagnosis}.", diagnosis)


@pytest.fixture(scope="module")
def bundled_cases():
    return load_cases(DATA_DIR / "cases.jsonl")


class TestType1:
    def test_seborrheic(self, tree):
        res = synth_type1([case("c1", "seborrheic keratosis", SK_RULE)], tree)
        (t,) = res.trajectories
        assert t.kind == "type1"
        assert t.final_diagnosis == t.primary_diagnosis == "seborrheic keratosis"
        assert t.annotation.malignancy == "benign"
        assert t.differential_diagnosis is None and t.comparison is None

    def test_empty(self, tree):
        res = synth_type1([], tree)
        assert res.trajectories == [] and res.skipped == []

    def test_unknown_skipped(self, tree):
        res = synth_type1([case("c1", "not a disease"), case("c2", "melanoma")], tree)
        assert [t.primary_diagnosis for t in res.trajectories] == ["melanoma"]
        assert res.skip_count == 1 and res.skipped[0][0] == "c1"

    def test_empty_rationale_rejected(self):
        with pytest.raises(CorpusError):
            DiagnosticCase("c", "", "   ", "melanoma")


class TestType2:
    def test_bowen_against_actinic(self, tree, ddx, bundled_cases):
        bowen = [c for c in bundled_cases if c.diagnosis == "bowen disease of the nail unit"]
        res = synth_type2(bowen, tree, ddx, TemplateGenerator(), seed=0, pool=bundled_cases)
        assert len(res.trajectories) == len(bowen)
        for t in res.trajectories:
            assert t.kind == "type2"
            assert t.differential_diagnosis == "actinic keratosis"
            assert t.final_diagnosis == "bowen disease of the nail unit"
            assert "actinic keratosis" in render_sft(t).response

    def test_single_diagnosis_fallback_fails(self, tree):
        cases = [case("c1", "melanoma"), case("c2", "melanoma")]
        with pytest.raises(CorpusError):
            synth_type2(cases, tree, DdxGraph(), TemplateGenerator())

    def test_fixed_template_verbatim(self, tree, ddx, bundled_cases):
        fixed = "Fixed comparison text."
        res = synth_type2(bundled_cases[:4], tree, ddx, TemplateGenerator(fixed), pool=bundled_cases)
        assert res.trajectories and all(t.comparison == fixed for t in res.trajectories)

    def test_generator_failure_skips_item(self, tree, ddx, bundled_cases):
        class Flaky:
            def generate_text(self, prompt):
                if "Primary diagnosis: bowen" in prompt:
                    raise GenerationError("boom")
                return "ok"

        res = synth_type2(bundled_cases, tree, ddx, Flaky())
        failed = {cid for cid, _ in res.skipped}
        assert failed == {c.id for c in bundled_cases if c.diagnosis == "bowen disease of the nail unit"}
        assert len(res.trajectories) == len(bundled_cases) - len(failed)


class TestType3:
    def test_seborrheic_to_melanoma(self, tree):
        g = DdxGraph([("seborrheic keratosis", "melanoma")])
        cases = [case("c1", "seborrheic keratosis", SK_RULE), case("c2", "melanoma", MEL_RULE)]
        res = synth_type3(cases[:1], tree, g, TemplateGenerator(), pool=cases)
        (t,) = res.trajectories
        assert t.final_diagnosis == "melanoma"
        assert t.annotation.malignancy == "malignant"
        resp = render_sft(t).response
        assert 'the most likely condition corresponds to "melanoma"' in resp
        assert "namely melanoma" in resp

    def test_reticulated_bundled(self, tree, ddx, bundled_cases):
        rsk = [c for c in bundled_cases if c.diagnosis == "reticulated seborrheic keratosis"]
        res = synth_type3(rsk, tree, ddx, TemplateGenerator(), pool=bundled_cases)
        assert {t.final_diagnosis for t in res.trajectories} == {"melanoma"}

    def test_deterministic(self, tree, ddx, bundled_cases):
        a = synth_type3(bundled_cases, tree, ddx, TemplateGenerator(), seed=3)
        b = synth_type3(bundled_cases, tree, ddx, TemplateGenerator(), seed=3, max_workers=1)
        assert [t.to_dict() for t in a.trajectories] == [t.to_dict() for t in b.trajectories]

    def test_child_fallback(self):
        # x has no edges; its parent p neighbours q; q has no cases, q1 neither, q2 does
        t = TaxonomyTree(
            [
                {"label": "p", "malignancy": "benign"},
                {"label": "x", "parent": "p", "malignancy": "benign"},
                {"label": "q", "malignancy": "malignant"},
                {"label": "q1", "parent": "q", "malignancy": "malignant"},
                {"label": "q2", "parent": "q", "malignancy": "malignant"},
                {"label": "r", "malignancy": "benign"},
            ]
        )
        g = DdxGraph([("p", "q")])
        cases = [case("c1", "x"), case("c2", "q2"), case("c3", "r")]
        res = synth_type3(cases[:1], t, g, TemplateGenerator(), pool=cases)
        (traj,) = res.trajectories
        assert traj.differential_diagnosis == traj.final_diagnosis == "q2"
        assert traj.annotation.path == ("q", "q2")


class TestRender:
    def test_type1_response(self, tree):
        (t,) = synth_type1([case("c1", "seborrheic keratosis", SK_RULE)], tree).trajectories
        rec = render_sft(t)
        assert "<diagnosis>seborrheic keratosis" in rec.response
        assert "classified as benign" in rec.response
        assert "subtype of benign keratosis-like lesion" in rec.response
        assert rec.response.startswith("<thinking>" + SK_RULE)

    def test_root_label_sentence(self, tree):
        (t,) = synth_type1([case("c1", "dermatofibroma")], tree).trajectories
        rec = render_sft(t)
        assert "Dermatofibroma is generally classified as benign." in rec.response
        assert "subtype" not in rec.response

    def test_invalid_trajectory_rejected(self, tree):
        (t,) = synth_type1([case("c1", "melanoma")], tree).trajectories
        bad = Trajectory(**{**t.__dict__, "final_diagnosis": "dermatofibroma"})
        with pytest.raises(CorpusError):
            render_sft(bad)


def test_roundtrip(tree, ddx, bundled_cases, tmp_path):
    res = synthesize(bundled_cases, tree, ddx, TemplateGenerator(), seed=0)
    path = tmp_path / "t.jsonl"
    write_jsonl(path, (t.to_dict() for t in res.trajectories))
    rows = read_jsonl(path)
    assert all(r["format_version"] == 1 for r in rows)
    back = [Trajectory.from_dict(r) for r in rows]
    assert back == res.trajectories
    assert sorted(t.kind for t in back).count("type1") == 8


def test_files_byte_identical(tree, ddx, bundled_cases, tmp_path):
    outs = []
    for i in range(2):
        res = synthesize(bundled_cases, tree, ddx, TemplateGenerator(), seed=11)
        p = tmp_path / f"run{i}.jsonl"
        write_jsonl(p, (render_sft(t).to_dict() for t in res.trajectories))
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(2, 40))
def test_kind_invariants(seed, n):
    from hierdx.taxonomy import load_ddx, load_taxonomy

    tree = load_taxonomy(DATA_DIR / "taxonomy.json")
    ddx = load_ddx(DATA_DIR / "ddx.json", tree)
    cases = synthetic_cases(tree, n, seed)
    if len({c.diagnosis for c in cases}) < 2:
        return
    res = synthesize(cases, tree, ddx, TemplateGenerator(), seed=seed)
    assert len(res.trajectories) == n
    for t in res.trajectories:
        t.validate()
        assert t.annotation == tree.path_of(t.final_diagnosis)
        if t.kind != "type1":
            assert t.differential_diagnosis != t.primary_diagnosis


class TestRemoteGenerator:
    def make(self, handler, retries=2):
        return ChatCompletionGenerator(
            "http://gen.test/v1", "m", retries=retries, backoff=0.0, transport=httpx.MockTransport(handler)
        )

    def test_success_rstripped(self):
        seen = []

        def handler(request):
            seen.append(json.loads(request.content))
            return httpx.Response(200, json={"choices": [{"message": {"content": "text here \n\n"}}]})

        assert self.make(handler).generate_text("hi") == "text here"
        assert seen[0]["messages"][0]["content"] == "hi"

    def test_server_errors_exhaust_retries(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(500)

        with pytest.raises(GenerationError) as exc:
            self.make(handler).generate_text("hi")
        assert len(calls) == 3
        assert exc.value.retries == 2

    def test_retry_then_success(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) < 2:
                return httpx.Response(503)
            return httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]})

        assert self.make(handler).generate_text("hi") == "fine"

    def test_timeout(self):
        def handler(request):
            raise httpx.ReadTimeout("slow", request=request)

        with pytest.raises(GenerationError, match="timeout"):
            self.make(handler, retries=0).generate_text("hi")

    @pytest.mark.parametrize("body", [{"choices": []}, {"nope": 1}, {"choices": [{"message": {"content": 3}}]}])
    def test_malformed(self, body):
        with pytest.raises(GenerationError, match="malformed"):
            self.make(lambda r: httpx.Response(200, json=body), retries=0).generate_text("hi")

    def test_credential_header(self, monkeypatch):
        monkeypatch.setenv("HIERDX_API_KEY", "secret")
        seen = []

        def handler(request):
            seen.append(request.headers.get("authorization"))
            return httpx.Response(200, json={"choices": [{"message": {"content": "x"}}]})

        self.make(handler).generate_text("hi")
        assert seen == ["Bearer secret"]
