"""Smoke test for the embedit Python bindings.

Build and install the extension first, e.g.

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/embedit-*.whl
"""

import json
import os
import tempfile

import embedit_py as em


def main():
    enc = em.Encoder.random(42)
    reference = enc.copy()
    print(enc)

    ids = enc.tokenize("a photo of a bear")
    assert ids[0] == 0 and 1 in ids, ids
    seq, pooled = enc.encode("a photo of a bear")
    assert len(seq) == 8 and len(pooled) == enc.d_model

    ledger = em.Ledger()
    r = em.edit(enc, ledger, "a photo of a bear", "a photo of a panda", "bear", lr=1e-2, max_iters=500)
    assert r["tau"] == 0.2 * r["initial_loss"]
    assert r["converged"] and r["final_loss"] <= r["tau"], r
    assert len(ledger) == 1 and not enc.same_weights(reference)

    # Prompts that avoid the edited word are untouched, bit for bit.
    assert enc.encode("a red rose") == reference.encode("a red rose")

    entry = {
        "source": "a photo of a bear",
        "destination": "a photo of a panda",
        "target_word": "bear",
        "positives": [["the bear", "the panda"]],
        "negatives": [["a red rose", "a red rose"]],
    }
    report = em.evaluate(json.dumps(entry), enc, reference)
    assert report["strict_specificity"] == 100.0, report

    budget = em.budget(enc, ledger)
    assert budget[0]["modified_scalars"] == enc.d_model
    assert budget[0]["update_flops"] == 2 * enc.d_model

    restored = em.Ledger.from_json(ledger.to_json())
    em.revert(enc, restored)
    assert enc.same_weights(reference) and len(restored) == 0

    out = em.balance(enc, em.Ledger(), "doctor", "a male doctor", "a female doctor")
    assert out["alpha"] >= 2.0 and out["tau"] == 0.0

    assert em.classify([1.0, 0.0], [0.0, 1.0], [1.0, 0.1]) == "destination"
    assert em.gender_delta([75.0, 25.0]) == 0.5

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.emb")
        reference.save(path)
        assert em.Encoder.load(path).same_weights(reference)

    try:
        em.edit(enc, em.Ledger(), "a photo of a wombat", "a cat", "wombat")
    except em.EmbeditError as e:
        assert "wombat" in str(e)
    else:
        raise AssertionError("unknown word accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
