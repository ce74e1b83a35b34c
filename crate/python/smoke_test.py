"""Smoke test for the contraprompt_py extension.

Build the module first, for example:

    cargo build -p contraprompt-python --release
    cp target/release/libcontraprompt_py.so python/contraprompt_py.so
    python3 python/smoke_test.py

or `pip install ./crates/python` with maturin available.
"""

import json
import os
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, HERE)

import contraprompt_py as cp  # noqa: E402

SIM = os.path.join(HERE, "..", "crates", "core", "tests", "fixtures", "sim")
EXCERPT = os.path.join(HERE, "..", "crates", "core", "tests", "fixtures", "hotpotqa_excerpt.tree")


def check_metrics():
    assert cp.token_f1("Paris", "Paris") == 1.0
    assert abs(cp.token_f1("the answer is Paris", "Paris", strip_articles=False) - 0.4) < 1e-12
    assert cp.token_f1("London", "Paris") == 0.0
    assert cp.exact_match(" paris. ", "Paris") == 1.0
    assert cp.macro_f1([["a", "b"]], [["a"]], ["a", "b"]) == 0.5


def check_feedback():
    assert cp.make_feedback(0.29, "wrong_entity") == cp.COARSE_FEEDBACK
    assert "wrong_entity" in cp.make_feedback(0.3, "wrong_entity")


def check_tree():
    with open(EXCERPT) as f:
        tree = cp.RuleTree.parse(f.read())
    assert len(tree.always) == 2 and len(tree.branches) == 2
    assert cp.RuleTree.parse(tree.serialize()) == tree
    bad = "<always>\n  <rule>x</rule>\n</always>\n<branch condition=\"c\">\n  <rule>x</rule>\n</branch>"
    assert any("already placed at" in v for v in cp.RuleTree.violations(bad))
    try:
        cp.RuleTree.parse(bad)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid tree accepted")


def check_replay_and_mining():
    with tempfile.TemporaryDirectory() as tmp:
        run_dir = os.path.join(tmp, "run")
        summary = cp.optimize_replay(
            os.path.join(SIM, "dataset.jsonl"),
            os.path.join(SIM, "base.cassette.jsonl"),
            os.path.join(SIM, "base.config.txt"),
            run_dir=run_dir,
        )
        assert summary["completed"] == 3, summary
        assert summary["stop_reason"] == "max_iterations"
        cp.RuleTree.parse(summary["tree"])

        with open(os.path.join(run_dir, "iter-01", "attempts.jsonl")) as f:
            log = f.read()
        mined = cp.mine(log)
        assert mined["pairs"], "expected contrastive pairs in the first iteration"
        deltas = [p["delta"] for p in mined["pairs"]]
        assert deltas == sorted(deltas, reverse=True)
        rate = cp.retry_success_rate(log)
        assert rate is not None and 0.0 <= rate <= 1.0
        assert "train" in cp.report(run_dir)

    examples = cp.load_dataset(os.path.join(SIM, "dataset.jsonl"), seed=7)
    assert len(examples) == 10
    json.dumps(examples)


def main():
    for check in (check_metrics, check_feedback, check_tree, check_replay_and_mining):
        check()
        print(f"ok  {check.__name__}")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
