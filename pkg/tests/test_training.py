import itertools
import json

import numpy as np
import pytest
import torch

from docfsl.config import TrainConfig
from docfsl.dataset import LABELS, Label, load_manifest, split_meta_classes
from docfsl.errors import CompatibilityError, NumericError
from docfsl.fsl import distance_loss, sample_episode
from docfsl.metrics import accuracy, auc
from docfsl.training import (
    EvalReport,
    aggregate_repetitions,
    build_encoder,
    evaluate_run,
    init_model,
    load_model,
    save_model,
    stream_rng,
    train_run,
)

G, F = Label.GENUINE, Label.FAKE


def small_config(**kw):
    base = dict(backbone="mock", feature_dim=16, hidden_dim=8, ru_kind="lstm", mode="unconditional", k=10, q=10,
                episodes=200, eval_every=200, eval_episodes=20, patch_size=32, rescale=False, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_accuracy_examples():
    assert accuracy([G, F], [G, F]) == 1.0
    assert accuracy([G, F], [F, G]) == 0.0
    assert accuracy([G, G, F, F], [G, G, F, G]) == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([G], [G, F])


def test_auc_examples():
    assert auc([0.1, 0.4, 0.35, 0.8], [G, G, F, F]) == pytest.approx(0.75, abs=1e-12)
    assert auc([0.1, 0.2, 0.8, 0.9], [G, G, F, F]) == 1.0
    assert auc([0.3] * 6, [G, F] * 3) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [G, G])


def brute_auc(scores, truths):
    pos = [s for s, t in zip(scores, truths) if t is F]
    neg = [s for s, t in zip(scores, truths) if t is G]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        truths = [G, F] + [LABELS[i] for i in rng.integers(0, 2, n - 2)]
        scores = np.round(rng.random(n), 1).tolist()
        assert abs(auc(scores, truths) - brute_auc(scores, truths)) <= 1e-12


def test_aggregate_examples():
    r = aggregate_repetitions([EvalReport(0.9, 0.95, 10), EvalReport(1.0, 1.0, 10)])
    assert r.mean_accuracy == pytest.approx(0.95) and r.std_accuracy == pytest.approx(0.05)
    assert aggregate_repetitions([EvalReport(0.7, 0.8, 4)]).std_accuracy == 0.0
    ten = aggregate_repetitions([EvalReport(0.8125, 0.9, 4)] * 10)
    assert ten.std_accuracy == 0.0 and ten.mean_accuracy == 0.8125 and ten.std_auc == 0.0
    with pytest.raises(ValueError):
        aggregate_repetitions([])


def test_aggregate_recomputes_from_entries():
    rng = np.random.default_rng(1)
    reps = [EvalReport(float(a), float(b), 40) for a, b in rng.random((7, 2))]
    r = aggregate_repetitions(reps)
    accs = [x.accuracy for x in r.per_repetition]
    mean = sum(accs) / len(accs)
    assert r.mean_accuracy == pytest.approx(mean, abs=1e-15)
    assert r.std_accuracy == pytest.approx((sum((a - mean) ** 2 for a in accs) / len(accs)) ** 0.5, abs=1e-15)


def test_eval_report_round_trip():
    r = EvalReport(0.5, 0.75, 20, [(0.5, 0.7), (0.5, 0.6)])
    back = EvalReport.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back == r and back.mean_loss == pytest.approx(0.65)


@pytest.fixture(scope="module")
def synth(synthetic_manifest):
    index = load_manifest(synthetic_manifest)
    return index, split_meta_classes(index, 6, 0, 0)


def test_training_determinism(synth):
    index, split = synth
    cfg = small_config(episodes=30, eval_every=15, eval_episodes=3)
    _, h1 = train_run(cfg, index, split)
    _, h2 = train_run(cfg, index, split)
    assert json.dumps(h1.to_dict()) == json.dumps(h2.to_dict())
    assert len(h1.losses) == 30 and [e for e, _ in h1.evals] == [15, 30]


@pytest.mark.parametrize("kind, seed", [("lstm", 0), ("lstm", 1), ("gru", 0)])
def test_loss_moving_average_non_increasing(synth, kind, seed):
    index, _ = synth
    split = split_meta_classes(index, 6, seed, 0)
    _, h = train_run(small_config(ru_kind=kind, seed=seed, eval_episodes=2), index, split)
    ma = np.convolve(h.losses, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(ma) <= 0), np.diff(ma).max()


def test_full_schedule_length(synth):
    # full-length schedule at a tiny feature size: conditional, k = q = 5, 5000 episodes
    index, split = synth
    cfg = small_config(mode="conditional", k=5, q=5, episodes=5000, eval_every=250, eval_episodes=1,
                       patch_size=64, feature_dim=4, hidden_dim=2)
    _, h = train_run(cfg, index, split)
    assert len(h.losses) == 5000
    assert [e for e, _ in h.evals] == list(range(250, 5001, 250))
    assert all(np.isfinite(h.losses))


def test_evaluation_does_not_mutate(synth):
    index, split = synth
    cfg = small_config(eval_episodes=10)
    enc = build_encoder(cfg)
    model = init_model(cfg, enc.extractor)
    before = model.checksum()
    grads = [p.grad for p in model.parameters()]
    evaluate_run(model, index, split.test_meta_classes, cfg, enc)
    assert model.checksum() == before
    assert [p.grad for p in model.parameters()] == grads


def test_untrained_chance_level(tmp_path):
    from docfsl.synthetic import make_dataset
    index = load_manifest(make_dataset(tmp_path, meta_classes=4, per_label=12, separation=0.0, seed=11))
    cfg = small_config(eval_episodes=100, mode="unconditional", k=5, q=5)
    enc = build_encoder(cfg)
    rep = evaluate_run(init_model(cfg, enc.extractor), index, index.meta_classes, cfg, enc)
    assert rep.n_queries == 1000
    assert abs(rep.accuracy - 0.5) <= 0.1


def test_single_meta_class_modes_identical(single_class_manifest):
    index = load_manifest(single_class_manifest)
    cfg = small_config(k=5, q=5, eval_episodes=25)
    enc = build_encoder(cfg)
    model = init_model(cfg, enc.extractor)
    logs = {}
    reports = {}
    for mode in ("conditional", "unconditional"):
        logs[mode] = []
        reports[mode] = evaluate_run(model, index, index.meta_classes, cfg.replace(mode=mode), enc,
                                     episode_log=logs[mode])
    strip = lambda eps: [(e["support"], e["query"], e["rng_state"]) for e in eps]
    assert strip(logs["conditional"]) == strip(logs["unconditional"])
    assert reports["conditional"].to_dict() == reports["unconditional"].to_dict()


def test_end_to_end_gradient(tmp_path):
    from docfsl.synthetic import make_dataset
    index = load_manifest(make_dataset(tmp_path, meta_classes=1, per_label=3, height=16, width=20))
    cfg = small_config(feature_dim=4, hidden_dim=3, patch_size=8, k=2, q=1, ru_kind="gru")
    enc = build_encoder(cfg)
    model = init_model(cfg, enc.extractor)
    ep = sample_episode(index, index.meta_classes, "u", 2, 1, np.random.default_rng(0))

    def loss():
        d, y = model.episode_distances(ep, enc)
        return distance_loss(d, y)

    model.ru.zero_grad()
    loss().backward()
    h = 1e-5
    for name, p in model.ru.params.items():
        flat = p.data.view(-1)
        for j in range(flat.numel()):
            old = flat[j].item()
            with torch.no_grad():
                flat[j] = old + h
                up = loss().item()
                flat[j] = old - h
                down = loss().item()
                flat[j] = old
            num = (up - down) / (2 * h)
            ana = p.grad.view(-1)[j].item()
            assert abs(ana - num) / max(abs(ana), abs(num), 1e-8) < 1e-3, (name, j, ana, num)


def test_nonfinite_loss_aborts(synth, monkeypatch):
    import docfsl.training as tr
    index, split = synth
    calls = []

    def poisoned(d, y):
        calls.append(1)
        loss = distance_loss(d, y)
        return loss * float("nan") if len(calls) == 2 else loss

    monkeypatch.setattr(tr, "distance_loss", poisoned)
    with pytest.raises(NumericError, match="episode 2"):
        train_run(small_config(episodes=3, eval_every=3), index, split)


def test_finetune_mock_backbone(synth):
    index, split = synth
    cfg = small_config(frozen=False, episodes=5, eval_every=5, eval_episodes=2)
    enc = build_encoder(cfg)
    before = enc.extractor.projection.copy()
    model, _ = train_run(cfg, index, split, enc)
    tuned = model.backbone_module.weight.detach().numpy()
    assert not np.allclose(tuned, before)
    assert np.array_equal(enc.extractor.projection, before)


def test_model_save_load(tmp_path, synth):
    index, split = synth
    cfg = small_config(episodes=5, eval_every=5, eval_episodes=2)
    model, _ = train_run(cfg, index, split)
    path = save_model(model, tmp_path / "m.ckpt")
    back = load_model(path)
    assert back.checksum() == model.checksum() and back.config == cfg
    assert save_model(back, tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()
    from docfsl.backbone import mock_extractor
    with pytest.raises(CompatibilityError, match="expects 16"):
        load_model(path, mock_extractor(12))


def test_finetuned_model_round_trip(tmp_path, synth):
    index, split = synth
    cfg = small_config(frozen=False, episodes=3, eval_every=3, eval_episodes=1)
    model, _ = train_run(cfg, index, split)
    back = load_model(save_model(model, tmp_path / "ft.ckpt"))
    assert back.backbone_module is not None and back.checksum() == model.checksum()


def test_stream_rng_independent():
    a = stream_rng(0, 0, 1).random(4)
    assert not np.array_equal(a, stream_rng(0, 0, 2).random(4))
    assert not np.array_equal(a, stream_rng(0, 1, 1).random(4))
    assert np.array_equal(a, stream_rng(0, 0, 1).random(4))
