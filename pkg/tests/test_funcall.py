import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slmsearch.funcall import (
    SYSTEM_PROMPT,
    EvalSample,
    FunctionCall,
    FunctionDef,
    Param,
    Ref,
    accuracy,
    call_scores,
    dump_outputs_jsonl,
    evaluate,
    load_outputs,
    load_samples,
    parse_calls,
    render_prompt,
    sample_from_json,
    sample_matched,
    sample_to_json,
    soft_accuracy,
)

ALARM = FunctionDef("set_alarm", (Param("hour", "integer"), Param("minute", "integer")))


def alarm_sample(hour=8, minute=0):
    return EvalSample("wake me", (ALARM,), (FunctionCall("result1", "set_alarm", {"hour": hour, "minute": minute}),))


def suite(fixtures_dir, name):
    d = fixtures_dir / "funcall"
    return load_outputs(d / f"{name}_outputs.jsonl"), load_samples(d / f"{name}_samples.jsonl")


# ---------------------------------------------------------------- prompt


def test_prompt_matches_golden(fixtures_dir):
    sample = load_samples(fixtures_dir / "funcall" / "perfect_samples.jsonl")[1]
    system, user = render_prompt(sample.functions, sample.query)
    golden = (fixtures_dir / "funcall" / "prompt_golden.txt").read_bytes()
    assert (system + "\n\n" + user).encode("utf-8") == golden


def test_prompt_shape():
    system, user = render_prompt([ALARM], "")
    assert system == "You are an expert in composing functions." == SYSTEM_PROMPT
    assert user.startswith("Here is a list of functions that you can invoke:\n{")
    assert user.endswith("\nNow my query is: \n")
    assert render_prompt([ALARM], "q") == render_prompt([ALARM], "q")
    with pytest.raises(ValueError):
        render_prompt([], "q")


def test_prompt_keeps_dollar_signs_in_query():
    _, user = render_prompt([ALARM], "costs $5 or $functions")
    assert user.endswith("Now my query is: costs $5 or $functions\n")


# ---------------------------------------------------------------- parsing


def test_parse_minimal_call():
    res = parse_calls("result1 = set_alarm(hour=8, minute=0)")
    assert res.skipped == 0
    assert res.calls == [FunctionCall("result1", "set_alarm", {"hour": 8, "minute": 0})]


def test_parse_reference_chain():
    text = 'result1 = func0(arg1="value1", arg2="value2")\nresult2 = func1(arg1="value1", arg2=result1)'
    calls = parse_calls(text).calls
    assert len(calls) == 2
    assert calls[1].args["arg2"] == Ref("result1")


def test_parse_garbage():
    res = parse_calls("this is not a function call at all")
    assert res.calls == [] and res.skipped == 1


def test_parse_value_kinds():
    call = parse_calls('r = f(s="a\\"b", i=-3, x=2.5, t=true, u=False, l=[1, "x", [true]])').calls[0]
    assert call.args == {"s": 'a"b', "i": -3, "x": 2.5, "t": True, "u": False, "l": [1, "x", [True]]}


@pytest.mark.parametrize("line", [
    "r = f(x=undefined_name)",       # reference to nothing
    "r = f(1, 2)",                   # positional
    "r = f(x=1, x=2)",               # repeated keyword
    "r = f(x=g())",                  # nested call expression
    "r = obj.f(x=1)",                # attribute call
    "r, s = f(x=1)",
    "f(x=1)",
    "r = f(x=1); s = g()",
    "r = f(x={'a': 1})",
    "r = f(x=1 + 2)",
])
def test_parse_rejects(line):
    res = parse_calls(line)
    assert res.calls == [] and res.skipped == 1


def test_parse_invalidates_self_and_forward_reference():
    res = parse_calls("a = f(x=b)\nb = g(y=1)\nc = h(z=c)")
    assert [c.result_name for c in res.calls] == ["b"]
    assert res.skipped == 2


def test_parse_deep_nesting_is_skipped_not_raised():
    res = parse_calls("r = f(x=" + "[" * 5000 + "]" * 5000 + ")")
    assert res.calls == [] and res.skipped == 1


@settings(max_examples=300, deadline=None)
@given(st.text())
def test_parse_is_total(text):
    res = parse_calls(text)
    defined = set()
    for call in res.calls:
        assert call.references() <= defined
        defined.add(call.result_name)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["f", "g", "set_alarm"]),
                          st.dictionaries(st.sampled_from(["a", "b", "hour"]),
                                          st.one_of(st.integers(-50, 50), st.text(max_size=5),
                                                    st.booleans(), st.floats(-10, 10))),
                          st.booleans()),
                min_size=1, max_size=5))
def test_to_text_parse_roundtrip(spec):
    calls = []
    for i, (fn, args, link) in enumerate(spec, start=1):
        args = dict(args)
        if link and calls:
            args["prev"] = Ref(calls[-1].result_name)
        calls.append(FunctionCall(f"result{i}", fn, args))
    text = "\n".join(c.to_text() for c in calls)
    assert parse_calls(text).calls == calls


# ---------------------------------------------------------------- metrics


def test_metric_examples():
    gt = [alarm_sample()]
    assert accuracy(["result1 = set_alarm(hour=8, minute=0)"], gt) == 1.0
    assert soft_accuracy(["result1 = set_alarm(hour=8, minute=30)"], gt) == 0.5
    assert soft_accuracy(["result1 = cancel_alarm(hour=8, minute=0)"], gt) == 0.0
    # an extra hallucinated call spoils exact match but not the soft score
    extra = "result1 = set_alarm(hour=8, minute=0)\nresult2 = set_alarm(hour=9, minute=0)"
    assert accuracy([extra], gt) == 0.0
    assert soft_accuracy([extra], gt) == 1.0


def test_four_samples_two_matched():
    samples = [alarm_sample(h) for h in (6, 7, 8, 9)]
    outputs = [f"result1 = set_alarm(hour={h}, minute=0)" for h in (6, 7, 1, 2)]
    assert accuracy(outputs, samples) == 0.5


def test_two_calls_scored_one_and_half():
    sample = EvalSample("q", (ALARM,), (FunctionCall("result1", "set_alarm", {"hour": 8, "minute": 0}),
                                         FunctionCall("result2", "set_alarm", {"hour": 9, "minute": 15})))
    pred = "a = set_alarm(hour=9, minute=0)\nb = set_alarm(hour=8, minute=0)"
    assert call_scores(parse_calls(pred).calls, sample.ground_truth) == [1.0, 0.5]
    assert soft_accuracy([pred], [sample]) == 0.75


def test_typed_value_equality():
    gt = [alarm_sample()]
    assert soft_accuracy(['r = set_alarm(hour="8", minute=0.0)'], gt) == 0.5
    assert soft_accuracy(["r = set_alarm(hour=8.0, minute=false)"], gt) == 0.5


def test_zero_parameter_call():
    fn = FunctionDef("ping")
    sample = EvalSample("q", (fn,), (FunctionCall("result1", "ping", {}),))
    assert soft_accuracy(["x = ping()"], [sample]) == 1.0
    assert soft_accuracy(["x = pong()"], [sample]) == 0.0


def test_reference_normalization_is_structural():
    contact = FunctionDef("search_contact", (Param("name"),))
    sms = FunctionDef("send_sms", (Param("phone_number"), Param("message")))
    truth = (FunctionCall("result1", "search_contact", {"name": "Alice"}),
             FunctionCall("result2", "send_sms", {"phone_number": Ref("result1"), "message": "hi"}))
    sample = EvalSample("q", (contact, sms), truth)
    good = 'c = search_contact(name="Alice")\ns = send_sms(phone_number=c, message="hi")'
    wrong_target = 'c = search_contact(name="Bob")\ns = send_sms(phone_number=c, message="hi")'
    literal = 'c = search_contact(name="Alice")\ns = send_sms(phone_number="c", message="hi")'
    assert sample_matched(parse_calls(good).calls, truth)
    assert not sample_matched(parse_calls(wrong_target).calls, truth)
    assert call_scores(parse_calls(wrong_target).calls, truth) == [0.0, 0.5]
    assert call_scores(parse_calls(literal).calls, truth) == [1.0, 0.5]


def test_length_mismatch():
    with pytest.raises(ValueError):
        accuracy(["a", "b"], [alarm_sample()])
    with pytest.raises(ValueError):
        soft_accuracy([], [alarm_sample()])
    with pytest.raises(ValueError):
        evaluate(["a"], [])


def test_pooled_average_can_fall_below_accuracy():
    # why per-sample averaging is the default: pooling over calls lets a
    # many-call failure outweigh a perfectly matched sample
    three = EvalSample("q", (ALARM,), tuple(FunctionCall(f"result{i}", "set_alarm", {"hour": i, "minute": 0})
                                            for i in (1, 2, 3)))
    samples = [alarm_sample(), three]
    preds = ["r = set_alarm(hour=8, minute=0)", ""]
    assert accuracy(preds, samples) == 0.5
    assert soft_accuracy(preds, samples, average="call") == 0.25
    assert soft_accuracy(preds, samples) == 0.5
    with pytest.raises(ValueError):
        soft_accuracy(preds, samples, average="token")


@pytest.mark.parametrize("name, expected", [("perfect", (1.0, 1.0)), ("mixed", (0.5, 0.75)),
                                            ("garbage", (0.0, 0.0))])
def test_fixture_suites(fixtures_dir, name, expected):
    outputs, samples = suite(fixtures_dir, name)
    report = evaluate(outputs, samples)
    assert (report.accuracy, report.soft_accuracy) == expected
    assert len(report.samples) == len(samples)
    doc = json.loads(json.dumps(report.to_dict()))
    assert doc["accuracy"] == expected[0]
    assert "accuracy" in report.table()


def test_garbage_suite_reports_diagnostics(fixtures_dir):
    report = evaluate(*suite(fixtures_dir, "garbage"))
    assert report.skipped_lines == 3


def test_plain_text_outputs_match_jsonl(fixtures_dir):
    d = fixtures_dir / "funcall"
    assert load_outputs(d / "mixed_outputs.txt") == load_outputs(d / "mixed_outputs.jsonl")


def test_outputs_jsonl_roundtrip(tmp_path):
    outs = ["a = f(x=1)\nb = g(y=a)", "", 'é = "ü"']
    path = tmp_path / "o.jsonl"
    path.write_text(dump_outputs_jsonl(outs), encoding="utf-8")
    assert load_outputs(path) == outs


def test_sample_json_roundtrip(fixtures_dir):
    for name in ("perfect", "mixed", "garbage"):
        for s in suite(fixtures_dir, name)[1]:
            assert sample_from_json(json.loads(json.dumps(sample_to_json(s)))) == s


@pytest.mark.parametrize("record", [
    {"query": "q", "functions": [], "ground_truth": [{"function": "f", "args": {}}]},
    {"query": "q", "functions": [{"name": "f"}], "ground_truth": []},
    {"query": "q", "functions": [{"name": "f"}], "ground_truth": [{"function": "f", "args": {"x": {"$ref": "result9"}}}]},
    {"query": "q", "functions": [{"name": "f"}], "ground_truth": [{"function": "f", "args": {"x": None}}]},
    {"query": "q", "functions": [{"name": "f", "parameters": [{"name": "a"}, {"name": "a"}]}],
     "ground_truth": [{"function": "f", "args": {}}]},
])
def test_invalid_samples(record):
    with pytest.raises(ValueError):
        sample_from_json(record)


# ---------------------------------------------------------------- randomized datasets


def random_dataset(seed: int, n_samples: int = 8):
    """Samples with 1-3 calls plus predictions that keep, drop, corrupt, rename or reorder calls."""
    rng = random.Random(seed)
    fns = [FunctionDef(n, tuple(Param(p) for p in "abc"[:k])) for n, k in (("f", 0), ("g", 1), ("h", 2), ("k", 3))]
    samples, preds = [], []
    for _ in range(n_samples):
        calls = []
        for i in range(rng.randint(1, 3)):
            fn = rng.choice(fns)
            args = {p.name: rng.choice([0, 1, "x", True]) for p in fn.params}
            if calls and fn.params and rng.random() < 0.3:
                args[fn.params[0].name] = Ref(calls[-1].result_name)
            calls.append(FunctionCall(f"result{i + 1}", fn.name, args))
        samples.append(EvalSample("q", tuple(fns), tuple(calls)))
        lines = []
        for c in calls:
            roll = rng.random()
            if roll < 0.15:
                continue
            text = c.to_text()
            if roll < 0.35 and c.args:
                key = rng.choice(sorted(c.args))
                text = text.replace(f"{key}=", f"{key}=7 or ", 1) if rng.random() < 0.3 else \
                    FunctionCall(c.result_name, c.function, {**c.args, key: 99}).to_text()
            elif roll < 0.45:
                text = text.replace(c.function + "(", "zz(", 1)
            lines.append(text)
        if rng.random() < 0.2:
            lines.append("result9 = g(a=5)")
        if rng.random() < 0.3:
            rng.shuffle(lines)
        preds.append("\n".join(lines))
    return samples, preds


@pytest.mark.parametrize("seed", range(100))
def test_soft_at_least_hard_on_random_datasets(seed):
    samples, preds = random_dataset(seed)
    assert soft_accuracy(preds, samples) >= accuracy(preds, samples)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(seed, rnd):
    samples, preds = random_dataset(seed)
    order = list(range(len(samples)))
    rnd.shuffle(order)
    s2, p2 = [samples[i] for i in order], [preds[i] for i in order]
    assert accuracy(p2, s2) == accuracy(preds, samples)
    assert soft_accuracy(p2, s2) == pytest.approx(soft_accuracy(preds, samples), abs=1e-12)
    assert soft_accuracy(p2, s2, "call") == pytest.approx(soft_accuracy(preds, samples, "call"), abs=1e-12)


def test_ground_truth_as_prediction_is_perfect():
    samples, _ = random_dataset(1234, 20)
    texts = ["\n".join(c.to_text() for c in s.ground_truth) for s in samples]
    assert accuracy(texts, samples) == 1.0 == soft_accuracy(texts, samples)
