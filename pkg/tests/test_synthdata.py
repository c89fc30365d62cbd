import numpy as np
import pytest

from missfuse.datamodel import CombinationId, combination_id, compute_mr
from missfuse.synthdata import (
    MissingProtocol,
    SynthConfig,
    add_feature_noise,
    apply_fixed,
    apply_random,
    generate,
    load_dataset,
    save_dataset,
)


def small_config(**kw):
    base = dict(
        n=24,
        m=3,
        task="classification",
        num_classes=4,
        informativeness=(1.0, 0.5, 0.3),
        noise_scale=(0.4, 0.4, 0.4),
        seq_lens=(5, 3, 4),
        feat_dims=(6, 4, 5),
        seed=11,
    )
    base.update(kw)
    return SynthConfig(**base)


def as_blob(samples):
    return b"".join(s.tensors[p].data.tobytes() for s in samples for p in range(s.m))


def test_generate_deterministic():
    cfg = small_config()
    a, b = generate(cfg), generate(cfg)
    assert as_blob(a) == as_blob(b)
    assert all(x.label == y.label for x, y in zip(a, b))


def test_generate_rejects_bad_config():
    with pytest.raises(ValueError):
        small_config(n=0)
    with pytest.raises(ValueError):
        small_config(num_classes=1)


def test_generate_no_signal_means_chance():
    # With all informativeness weights zero the class-conditional means collapse,
    # so a linear probe cannot beat chance by much.
    from sklearn.linear_model import LogisticRegression

    cfg = small_config(n=1200, informativeness=(0.0, 0.0, 0.0), seed=3)
    samples = generate(cfg)
    X = np.stack([s.tensors[0].data.mean(axis=0) for s in samples])
    y = np.array([s.label.class_index for s in samples])
    probe = LogisticRegression(max_iter=500).fit(X[:800], y[:800])
    acc = probe.score(X[800:], y[800:])
    assert abs(acc - 1.0 / cfg.num_classes) < 0.12


def test_generate_informative_modality_wins_probe():
    from sklearn.linear_model import LogisticRegression

    cfg = small_config(n=2000, informativeness=(1.0, 0.2, 0.2), seed=5)
    samples = generate(cfg)
    y = np.array([s.label.class_index for s in samples])

    def probe_acc(p):
        X = np.stack([s.tensors[p].data.mean(axis=0) for s in samples])
        probe = LogisticRegression(max_iter=500).fit(X[:1400], y[:1400])
        return probe.score(X[1400:], y[1400:])

    assert probe_acc(0) > probe_acc(1)


def test_apply_fixed():
    samples = generate(small_config())
    full = apply_fixed(samples, CombinationId(id=7))
    assert all(s.mask.bits == (1, 1, 1) for s in full)

    lang_only = apply_fixed(samples[:3], CombinationId(id=1))
    assert all(s.mask.bits == (1, 0, 0) for s in lang_only)

    lang_audio = apply_fixed(samples, CombinationId.from_names("L,A", m=3))
    assert compute_mr([s.mask for s in lang_audio], 3) == pytest.approx(1.0 / 3.0)
    # underlying tensors untouched
    assert as_blob(lang_audio) == as_blob(samples)


def test_apply_random_exact_count():
    samples = generate(small_config(n=1000))
    dropped = apply_random(samples, target_mr=0.3, seed=9)
    masks = np.stack([s.mask.as_array() for s in dropped])
    assert (masks.size - masks.sum()) == round(0.3 * 1000 * 3) == 900
    assert compute_mr([s.mask for s in dropped], 3) == pytest.approx(0.3)


def test_apply_random_saturation():
    samples = generate(small_config(n=60))
    dropped = apply_random(samples, target_mr=2.0 / 3.0, seed=1)
    counts = [s.mask.available_count for s in dropped]
    assert all(c == 1 for c in counts)


def test_apply_random_deterministic():
    samples = generate(small_config(n=200))
    a = apply_random(samples, 0.5, seed=42)
    b = apply_random(samples, 0.5, seed=42)
    assert [s.mask.bits for s in a] == [s.mask.bits for s in b]
    c = apply_random(samples, 0.5, seed=43)
    assert [s.mask.bits for s in a] != [s.mask.bits for s in c]


def test_apply_random_rejects_infeasible():
    samples = generate(small_config(n=10))
    with pytest.raises(ValueError):
        apply_random(samples, 0.8, seed=0)
    with pytest.raises(ValueError):
        apply_random(samples, 0.0, seed=0)


def test_apply_random_never_all_zero_quick():
    rng = np.random.default_rng(123)
    cfg = small_config(n=17)
    samples = generate(cfg)
    for _ in range(200):
        mr = float(rng.uniform(0.05, 2.0 / 3.0))
        dropped = apply_random(samples, mr, seed=int(rng.integers(1 << 31)))
        assert all(s.mask.available_count >= 1 for s in dropped)


def test_missing_protocol_validation():
    MissingProtocol(kind="fixed", fixed_pattern=CombinationId(id=3))
    MissingProtocol(kind="random", target_mr=0.4)
    with pytest.raises(ValueError):
        MissingProtocol(kind="random", fixed_pattern=CombinationId(id=1))
    with pytest.raises(ValueError):
        MissingProtocol(kind="other")


def test_add_feature_noise():
    samples = generate(small_config(n=5))
    noisy = add_feature_noise(samples, intensity=2.0, seed=0)
    assert as_blob(noisy) != as_blob(samples)
    again = add_feature_noise(samples, intensity=2.0, seed=0)
    assert as_blob(noisy) == as_blob(again)
    assert as_blob(add_feature_noise(samples, 0.0, seed=0)) == as_blob(samples)


def test_dataset_roundtrip(tmp_path):
    cfg = small_config(n=30)
    train = generate(cfg)
    test = apply_random(generate(small_config(n=12, seed=99)), 0.4, seed=2)
    save_dataset(tmp_path / "ds", {"train": train, "test": test}, cfg)
    splits, loaded_cfg = load_dataset(tmp_path / "ds")
    assert loaded_cfg == cfg
    assert as_blob(splits["train"]) == as_blob(train)
    assert [s.mask.bits for s in splits["test"]] == [s.mask.bits for s in test]
    assert [s.label for s in splits["train"]] == [s.label for s in train]

    # rerun produces byte-identical files
    first = (tmp_path / "ds" / "train_features_0.bin").read_bytes()
    save_dataset(tmp_path / "ds2", {"train": train, "test": test}, cfg)
    assert (tmp_path / "ds2" / "train_features_0.bin").read_bytes() == first
