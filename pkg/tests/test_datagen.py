import numpy as np
import pytest

from gblend.datagen import (Dataset, ModalitySpec, SyntheticSpec, balance_multilabel, gen_multimodal,
                            load_dataset, save_dataset, split)


def spec(**kw):
    base = dict(class_count=4, n_samples=1000, seed=3, modalities=[
        ModalitySpec("V", dim=8, informative_dim=4, snr=1.0),
        ModalitySpec("A", dim=12, informative_dim=2, snr=0.5, bait_dim=6, bait_strength=3.0)])
    base.update(kw)
    return SyntheticSpec(**base)


def lstsq_probe_accuracy(ds, modality):
    tr, te = ds.part("train"), ds.part("test")
    X = np.hstack([tr.features[modality], np.ones((len(tr), 1))])
    Y = np.eye(int(ds.meta["class_count"]))[tr.labels]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    Xt = np.hstack([te.features[modality], np.ones((len(te), 1))])
    return np.mean(np.argmax(Xt @ W, axis=1) == te.labels)


def test_same_seed_is_bit_identical():
    a, b = gen_multimodal(spec()), gen_multimodal(spec())
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.features, b.features))
    assert a.labels.tobytes() == b.labels.tobytes()
    c = gen_multimodal(spec(seed=4))
    assert c.features[0].tobytes() != a.features[0].tobytes()


def test_layout_and_bait_scale():
    ds = gen_multimodal(spec(n_samples=20000))
    A = ds.features[1]
    assert A.shape == (20000, 12)
    assert np.std(A[:, 6:]) == pytest.approx(3.0, rel=0.02)
    assert np.std(A[:, 2:6]) == pytest.approx(1.0, rel=0.02)


def test_high_snr_is_linearly_separable():
    s = spec(n_samples=2000, modalities=[ModalitySpec("V", dim=8, informative_dim=8, snr=20.0)])
    ds = split(gen_multimodal(s), (0.7, 0.1, 0.2), 0)
    assert lstsq_probe_accuracy(ds, 0) >= 0.99


def test_no_signal_gives_chance_accuracy():
    s = spec(n_samples=4000, modalities=[ModalitySpec("V", dim=8, informative_dim=8, snr=0.0)])
    ds = split(gen_multimodal(s), (0.5, 0.0, 0.5), 0)
    acc = lstsq_probe_accuracy(ds, 0)
    n_test = ds.split_sizes()["test"]
    assert abs(acc - 0.25) <= 4 * np.sqrt(0.25 * 0.75 / n_test)


def test_label_noise_caps_accuracy():
    s = spec(n_samples=4000, modalities=[ModalitySpec("V", dim=8, informative_dim=8, snr=20.0, label_noise=0.4)])
    ds = split(gen_multimodal(s), (0.7, 0.1, 0.2), 0)
    # a flipped view lands on the true class a quarter of the time
    assert lstsq_probe_accuracy(ds, 0) == pytest.approx(0.6 + 0.4 / 4, abs=0.05)


@pytest.mark.parametrize("bad", [
    dict(dim=4, informative_dim=5), dict(dim=4, informative_dim=2, bait_dim=3),
    dict(dim=4, informative_dim=2, label_noise=1.0), dict(dim=0, informative_dim=0)])
def test_invalid_modality_specs(bad):
    with pytest.raises(ValueError):
        gen_multimodal(spec(modalities=[ModalitySpec("X", **bad)]))


def test_split_sizes_and_determinism():
    ds = gen_multimodal(spec())
    a, b = split(ds, (0.8, 0.1, 0.1), 5), split(ds, (0.8, 0.1, 0.1), 5)
    assert a.splits.tobytes() == b.splits.tobytes()
    sizes = a.split_sizes()
    assert abs(sizes["train"] - 800) <= 4 and abs(sizes["holdout"] - 100) <= 4
    assert sum(sizes.values()) == 1000


def test_split_is_stratified_within_two_percent():
    ds = split(gen_multimodal(spec(n_samples=5000)), (0.66, 0.08, 0.26), 1)
    overall = np.bincount(ds.labels, minlength=4) / len(ds)
    for name in ("train", "holdout", "test"):
        part = ds.part(name).labels
        assert np.abs(np.bincount(part, minlength=4) / len(part) - overall).max() <= 0.02


def test_split_overflow_rejected():
    with pytest.raises(ValueError):
        split(gen_multimodal(spec()), (0.8, 0.3), 0)


def test_splits_partition_rows():
    ds = split(gen_multimodal(spec()), (0.6, 0.2, 0.2), 2)
    idx = np.concatenate([ds.indices(s) for s in ("train", "holdout", "test")])
    assert sorted(idx.tolist()) == list(range(len(ds)))


# -- balancer -------------------------------------------------------------------------

def transcribed_balancer(labels, M, N, seed):
    """Step-by-step reading of the sub-sampling pseudocode, kept deliberately naive."""
    rows = [set(np.flatnonzero(r).tolist()) for r in labels]
    n_classes = labels.shape[1]
    volume = {c: sum(1 for r in rows if c in r) for c in range(n_classes)}
    keep = [c for c in range(n_classes) if volume[c] >= M]
    rows = [r & set(keep) for r in rows]
    V = {c: sum(1 for r in rows if c in r) for c in keep}
    Vp = {c: 0 for c in keep}
    rng = np.random.default_rng(seed)
    selected = []
    for i in rng.permutation(len(rows)):
        if not rows[i]:
            continue
        smallest = None
        for c in sorted(rows[i]):
            if smallest is None or Vp[c] < Vp[smallest]:
                smallest = c
        r = rng.integers(0, V[smallest] - Vp[smallest])
        if r < N - Vp[smallest]:
            selected.append(int(i))
            for c in rows[i]:
                Vp[c] += 1
    return sorted(selected), keep


def multilabel(n, rates, seed):
    return gen_multimodal(SyntheticSpec(class_count=len(rates), n_samples=n, seed=seed, multi_label=True,
                                        label_rates=list(rates),
                                        modalities=[ModalitySpec("V", dim=3, informative_dim=2)]))


def test_balancer_matches_transcription_on_10k_rows():
    ds = multilabel(10_000, [0.3, 0.12, 0.05, 0.004, 0.2, 0.08], 1)
    out = balance_multilabel(ds, 1000, 600, seed=7)
    ref_rows, ref_keep = transcribed_balancer(ds.labels, 1000, 600, 7)
    assert out.meta["source_rows"] == ref_rows
    assert out.meta["kept_classes"] == ref_keep
    vol_in = ds.labels[:, ref_keep].sum(axis=0)
    vol_out = out.labels.sum(axis=0)
    assert np.all(vol_out <= vol_in)
    assert np.all(vol_out >= 1)
    assert out.labels.shape[1] == len(ref_keep) < ds.labels.shape[1]


def test_skewed_three_class_example():
    rng = np.random.default_rng(0)
    labels = np.zeros((1300, 3), dtype=np.int8)
    labels[:1000, 0] = 1
    labels[900:1300, 1] = 1  # 100 rows carry both classes
    labels[rng.choice(1300, 50, replace=False), 2] = 1
    ds = Dataset([np.zeros((1300, 1))], labels, np.zeros(1300, dtype=np.int8), meta={"class_count": 3})
    out = balance_multilabel(ds, 100, 300, seed=3)
    assert out.meta["kept_classes"] == [0, 1]
    assert out.meta["source_rows"] == transcribed_balancer(labels, 100, 300, 3)[0]
    vol = out.labels.sum(axis=0)
    assert vol[1] <= 300 and vol[0] <= 300 + 100


def test_small_classes_keep_every_row():
    labels = np.eye(3, dtype=np.int8)[np.arange(300) % 3]
    ds = Dataset([np.zeros((300, 1))], labels, np.zeros(300, dtype=np.int8))
    out = balance_multilabel(ds, 10, 500, seed=0)
    assert out.meta["source_rows"] == list(range(300))


def test_threshold_above_every_class_raises():
    ds = multilabel(500, [0.2, 0.3], 0)
    with pytest.raises(ValueError):
        balance_multilabel(ds, 10_000, 50, seed=0)


def test_balancer_needs_multi_hot():
    with pytest.raises(ValueError):
        balance_multilabel(gen_multimodal(spec()), 1, 10, 0)


# -- persistence ------------------------------------------------------------------------

@pytest.mark.parametrize("multi", [False, True])
def test_save_load_round_trip(tmp_path, multi):
    ds = multilabel(200, [0.3, 0.5], 2) if multi else split(gen_multimodal(spec()), (0.7, 0.1, 0.2), 0)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert all(a.tobytes() == b.tobytes() for a, b in zip(ds.features, back.features))
    assert np.array_equal(ds.labels, back.labels) and back.labels.dtype == ds.labels.dtype
    assert np.array_equal(ds.splits, back.splits)
    assert back.modality_names == ds.modality_names


def test_load_rejects_foreign_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text('{"format": "x", "version": 1}')
    with pytest.raises(ValueError):
        load_dataset(tmp_path)
