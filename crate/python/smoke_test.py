"""Smoke test for the `radpo` extension module.

Build and run from the repository root:

    cargo build -p radpo-py --release --features extension-module
    cp target/release/libradpo.so python/radpo.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import radpo  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    probs, values = [0.5, 0.5], [0.0, 1.0]
    assert close(radpo.penalty_aggregate(probs, values), 0.5)
    assert close(radpo.penalty_aggregate(probs, values, "cvar", 0.5), 1.0)
    assert close(radpo.value_aggregate(probs, values, "cvar", 0.5), 0.0)
    erm = radpo.penalty_aggregate(probs, values, "erm", 2.0)
    assert close(erm, math.log(0.5 + 0.5 * math.exp(2.0)) / 2.0)
    assert close(radpo.bt_probability(1.0, 0.0), 1.0 / (1.0 + math.exp(-1.0)))

    reference, pairs = radpo.generate(seed=3, n_pairs=300)
    assert len(pairs) == 300
    row = reference.next_logprobs(list(pairs[0][0]))
    assert close(sum(math.exp(x) for x in row), 1.0)

    loss, grad = radpo.loss_and_grad(reference, reference, pairs[:8], "radpo2", 0.1,
                                     alpha=0.5, measure="cvar", mu=0.95)
    assert close(loss, math.log(2.0), 1e-12), loss
    assert len(grad) == len(reference.logits)

    rows, policy = radpo.train_policy(reference, pairs, {"loss": "tdpo2", "alpha": "0.5", "epochs": "2"})
    assert rows[0]["reward_accuracy"] == 0.5
    assert rows[-1]["train_loss"] < rows[0]["train_loss"]

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "final.ckpt")
        policy.save(path)
        again = radpo.Policy.load(path)
        assert again.to_checkpoint() == policy.to_checkpoint()

    ok, report = radpo.verify(seed=7, mdps=10, trials=50)
    assert ok, report

    try:
        radpo.penalty_aggregate([0.5, 0.6], [0.0, 1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("invalid distribution accepted")

    print("smoke test passed:", policy, f"final accuracy {rows[-1]['reward_accuracy']:.3f}")


if __name__ == "__main__":
    main()
