"""Smoke test for the Python extension: generate, train briefly, evaluate, reload."""

import os
import tempfile

import mental_perceiver as mp

CONFIG = """
[model]
input_width = 8
audio_width = 4
latent_width = 8
query_width = 8
output_width = 8
depth = 2
heads = 2

[train]
learning_rate = 1e-2
batch_size = 8
"""


def main():
    corpus = mp.generate_synthetic(normal=12, disorder=12, text_width=8, audio_width=4, seed=3)
    assert len(corpus) == 24
    assert len(corpus.participant_ids("validation")) > 0

    priors = mp.Priors.from_corpus(corpus)
    assert len(priors) == 8
    assert priors.counts[0] > 0 and priors.counts[1] > 0

    ckpt, log = mp.train(corpus, priors, config=CONFIG, epochs=4, seed=1)
    assert len(log) >= 1
    assert all(0.0 <= e["val_uar"] <= 1.0 for e in log)

    out = ckpt.predict(text=[[0.1] * 8] * 5, audio=[[0.0] * 4] * 10)
    assert abs(sum(out["probabilities"]) - 1.0) < 1e-5
    assert out["predicted"] in (0, 1)

    reports = ckpt.evaluate(corpus, split="test")
    assert [r["level"] for r in reports] == ["segment", "participant"]

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "best.ckpt")
        ckpt.save(path)
        again = mp.Checkpoint.load(path)
        assert again.epoch == ckpt.epoch
        assert again.evaluate(corpus, split="test") == reports

    m = mp.compute_metrics(tp=3, fp=1, fn_=1, tn=5)
    assert abs(m["uar"] - (0.75 + 5 / 6) / 2) < 1e-12
    assert mp.segment_windows(60.0) == [(0.0, 60.0), (50.0, 60.0)]
    assert len(mp.mel_spectrogram([0.0] * 16000, 16000)) == 98

    try:
        mp.Checkpoint.load(os.devnull)
    except ValueError:
        pass
    else:
        raise AssertionError("empty checkpoint should not load")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
