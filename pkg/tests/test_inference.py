import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nesycd.client import GenerationRequest, GenerationResponse, GeneratedSequence
from nesycd.core import PipelineConfig
from nesycd.datasets import render_ad_prompt
from nesycd.inference import GateError, answer_adaptive, compute_delta, run_inference
from nesycd.kb import build_kb, topk
from nesycd.prompts import render_dc_prompt

from .conftest import ScriptedStudent, make_entry, make_example, make_role
from .oracles import mean_reference

ROLE = make_role("http://127.0.0.1:9", "mock-student", "student")
CFG = PipelineConfig()


def script_for(example, margin, dc="Steps. Therefore, the answer is 1.", ad=None):
    return {
        example.question: {
            "margin": margin,
            "dc": dc,
            "ad": ad or "With knowledge. Therefore, the answer is 2.",
        }
    }


def knowledge_base():
    return build_kb([make_entry(0), make_entry(1), make_entry(2)])


class TestComputeDelta:
    def test_fully_confident(self):
        assert compute_delta([(1.0, 0.0)] * 5) == 1.0

    def test_maximal_ambiguity(self):
        assert compute_delta([(0.5, 0.5)] * 3) == 0.0

    def test_hand_arithmetic(self):
        value = compute_delta([(0.9, 0.05), (0.6, 0.3), (0.7, 0.2)])
        assert value == pytest.approx((0.85 + 0.30 + 0.50) / 3, abs=1e-12)

    def test_empty_is_error(self):
        with pytest.raises(GateError, match="no answer tokens"):
            compute_delta([])

    @pytest.mark.parametrize("pair", [(0.4, 0.5), (1.1, 0.2), (0.5, -0.1)])
    def test_invalid_pairs_rejected(self, pair):
        with pytest.raises(GateError):
            compute_delta([pair])

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(
            st.tuples(st.floats(0, 1), st.floats(0, 1)).map(
                lambda pair: (max(pair), min(pair))
            ),
            min_size=1,
            max_size=32,
        )
    )
    def test_matches_mean_oracle_and_bounds(self, pairs):
        value = compute_delta(pairs)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(mean_reference(pairs), abs=1e-12)


class TestGate:
    def test_confident_student_skips_retrieval(self):
        example = make_example(0, split="test")
        student = ScriptedStudent(script_for(example, (0.95, 0.05)))
        report = answer_adaptive(example, knowledge_base(), CFG, student, ROLE)
        assert report.retrieved is False
        assert report.knowledge_ids == ()
        assert report.final_text == "Steps. Therefore, the answer is 1."
        assert report.delta == pytest.approx(0.9, abs=1e-12)
        assert report.steps_used == len(report.per_step) <= CFG.probe_steps

    def test_unconfident_student_retrieves_topk(self):
        example = make_example(0, split="test")
        kb = knowledge_base()
        student = ScriptedStudent(script_for(example, (0.55, 0.45)))
        report = answer_adaptive(example, kb, CFG, student, ROLE)
        assert report.retrieved is True
        expected = topk(example.question, CFG.m, kb, CFG.retriever)
        assert report.knowledge_ids == tuple(r.entry_id for r in expected)
        assert report.final_text == "With knowledge. Therefore, the answer is 2."

    def test_threshold_zero_never_retrieves(self):
        example = make_example(0, split="test")
        student = ScriptedStudent(script_for(example, (0.5, 0.5)))
        report = answer_adaptive(
            example, knowledge_base(), CFG, student, ROLE, threshold=0.0
        )
        assert report.retrieved is False

    def test_retrieval_prompt_parity_with_builder(self):
        example = make_example(0, split="test")
        kb = knowledge_base()
        student = ScriptedStudent(script_for(example, (0.2, 0.1)))
        report = answer_adaptive(example, kb, CFG, student, ROLE)
        assert report.retrieved
        entries = [kb.entry_by_id(eid) for eid in report.knowledge_ids]
        expected_prompt = render_ad_prompt(example.question, entries)
        assert student.prompts[-1] == expected_prompt

    def test_first_pass_discarded_on_retrieval(self):
        example = make_example(0, split="test")
        student = ScriptedStudent(
            script_for(example, (0.5, 0.45), dc="First pass text only goes to the probe field.")
        )
        report = answer_adaptive(example, knowledge_base(), CFG, student, ROLE)
        assert report.retrieved
        assert report.first_pass_text.startswith("First pass")
        assert report.final_text != report.first_pass_text

    def test_probe_empty_forces_retrieval_flagged(self):
        example = make_example(0, split="test")

        def student(request: GenerationRequest) -> GenerationResponse:
            if request.want_logprobs:
                return GenerationResponse(sequences=(GeneratedSequence(text="", tokens=()),))
            return GenerationResponse(sequences=(GeneratedSequence(text="fallback answer"),))

        report = answer_adaptive(example, knowledge_base(), CFG, student, ROLE)
        assert report.probe_empty is True
        assert report.retrieved is True
        assert report.steps_used == 0 and report.delta == 0.0

    def test_empty_kb_retrieval_falls_back_to_dc(self):
        example = make_example(0, split="test")
        student = ScriptedStudent(script_for(example, (0.5, 0.45)))
        report = answer_adaptive(example, build_kb([]), CFG, student, ROLE)
        assert report.retrieved is True
        assert report.kb_empty_fallback is True
        assert report.knowledge_ids == ()
        assert report.final_text == "Steps. Therefore, the answer is 1."

    def test_probe_uses_dc_prompt_capped_at_T(self):
        example = make_example(0, split="test")
        seen = {}

        def student(request: GenerationRequest) -> GenerationResponse:
            if request.want_logprobs:
                seen["probe"] = request
                words = tuple()
                return GenerationResponse(sequences=(GeneratedSequence(text="", tokens=words),))
            return GenerationResponse(sequences=(GeneratedSequence(text="x"),))

        answer_adaptive(example, knowledge_base(), CFG, student, ROLE)
        probe = seen["probe"]
        assert probe.messages[-1][1] == render_dc_prompt(example.question)
        assert probe.max_new_tokens == CFG.probe_steps
        assert probe.temperature == 0.0
        assert probe.top_logprobs_k >= 2

    def test_gate_monotone_in_threshold(self):
        rng = random.Random(3)
        margins = [
            [(p, p * rng.random()) for p in (rng.random() for _ in range(8))]
            for _ in range(40)
        ]
        deltas = [compute_delta([(max(a, b), min(a, b)) for a, b in m]) for m in margins]
        previous: set[int] = set()
        for threshold in [0.0, 0.1, 0.3, 0.5, 0.68, 0.9, 1.0]:
            retrieved = {i for i, d in enumerate(deltas) if d < threshold}
            assert previous <= retrieved
            previous = retrieved


class TestRunInference:
    def script(self, examples, low_confidence=()):
        script = {}
        for i, example in enumerate(examples):
            margin = (0.55, 0.45) if i in low_confidence else (0.95, 0.05)
            script[example.question] = {
                "margin": margin,
                "dc": f"Direct. Therefore, the answer is {example.answer}.",
                "ad": f"Helped. Therefore, the answer is {example.answer}.",
            }
        return script

    def test_ten_examples_ten_reports_in_order(self):
        examples = [make_example(i, split="test") for i in range(10)]
        student = ScriptedStudent(self.script(examples, low_confidence={2, 5}))
        run = run_inference(examples, knowledge_base(), CFG, student, ROLE)
        assert len(run.reports) == 10
        assert [r.example_id for r in run.reports] == [ex.id for ex in examples]
        assert run.retrieval_rate == 0.2
        assert run.eval_report.overall_accuracy == 1.0
        assert run.failures == []

    def test_deterministic_reports(self):
        examples = [make_example(i, split="test") for i in range(6)]
        runs = [
            run_inference(
                examples, knowledge_base(), CFG,
                ScriptedStudent(self.script(examples, low_confidence={1})), ROLE,
            )
            for _ in range(2)
        ]
        assert [r.to_record() for r in runs[0].reports] == [r.to_record() for r in runs[1].reports]

    def test_threshold_extremes(self):
        examples = [make_example(i, split="test") for i in range(5)]
        student = ScriptedStudent(self.script(examples))
        zero = run_inference(examples, knowledge_base(), CFG, student, ROLE, threshold=0.0)
        assert zero.retrieval_rate == 0.0
        one = run_inference(examples, knowledge_base(), CFG, student, ROLE, threshold=1.0)
        assert one.retrieval_rate == 1.0

    def test_per_example_failure_isolated(self):
        examples = [make_example(i, split="test") for i in range(4)]
        script = self.script(examples)
        inner = ScriptedStudent(script)
        poison = examples[2].question

        def student(request):
            if poison in request.messages[-1][1]:
                raise RuntimeError("scripted failure")
            return inner(request)

        run = run_inference(examples, knowledge_base(), CFG, student, ROLE)
        assert len(run.reports) == 3
        assert len(run.failures) == 1 and run.failures[0][0] == examples[2].id
        # The failed example scores as an empty generation.
        assert run.eval_report.total == 4
        assert run.eval_report.correct == 3
        assert run.eval_report.unanswerable == 1

    def test_report_invariants_hold(self):
        examples = [make_example(i, split="test") for i in range(8)]
        student = ScriptedStudent(self.script(examples, low_confidence={0, 3}))
        run = run_inference(examples, knowledge_base(), CFG, student, ROLE)
        for report in run.reports:
            assert report.steps_used == len(report.per_step)
            assert 0.0 <= report.delta <= 1.0
            if not report.probe_empty:
                assert report.delta == pytest.approx(
                    mean_reference(list(report.per_step)), abs=1e-12
                )
                assert report.retrieved == (report.delta < CFG.delta_threshold)
