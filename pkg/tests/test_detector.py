import copy

import pytest
import torch

from stepdet.detector import (
    CLASS_SPECIFIC_PREFIXES,
    TRAINABLE_ALL,
    TRAINABLE_CLASS_SPECIFIC,
    DetectorConfig,
    ShapeDetector,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
    sine_position_encoding,
    snapshot,
    trainable_parameters,
)


def _small_config(num_classes=6) -> DetectorConfig:
    return DetectorConfig(num_classes=num_classes, feature_dim=32, num_queries=8,
                          backbone_channels=(16, 32), image_size=32, num_heads=4,
                          ffn_dim=64)


def _model(seed=0, num_classes=6) -> ShapeDetector:
    torch.manual_seed(seed)
    return ShapeDetector(_small_config(num_classes))


def _batch(model, n=2, seed=1) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    s = model.config.image_size
    return torch.rand(n, 3, s, s, generator=g)


# ------------------------------------------------------------ forward


def test_forward_output_shapes():
    m = _model().eval()
    out = m(_batch(m, 3))
    cfg = m.config
    grid = cfg.feature_grid
    assert out.features.shape == (3, cfg.feature_dim, grid, grid)
    assert out.query_features.shape == (3, cfg.num_queries, cfg.feature_dim)
    assert out.class_logits.shape == (3, cfg.num_queries, cfg.num_classes)
    assert out.boxes.shape == (3, cfg.num_queries, 4)


def test_forward_boxes_squashed_to_unit_range():
    m = _model().eval()
    out = m(_batch(m, 4, seed=5))
    assert torch.all(out.boxes >= 0) and torch.all(out.boxes <= 1)


def test_forward_no_cross_image_coupling():
    m = _model().eval()
    x = _batch(m, 1, seed=9)
    pair = torch.cat([x, x], dim=0)
    out = m(pair)
    assert torch.equal(out.class_logits[0], out.class_logits[1])
    assert torch.equal(out.boxes[0], out.boxes[1])
    assert torch.equal(out.query_features[0], out.query_features[1])


def test_forward_deterministic_in_eval_mode():
    m = _model().eval()
    x = _batch(m, 2, seed=3)
    with torch.no_grad():
        a, b = m(x), m(x)
    assert torch.equal(a.class_logits, b.class_logits)
    assert torch.equal(a.boxes, b.boxes)


def test_forward_rejects_wrong_image_size():
    m = _model().eval()
    with pytest.raises(ValueError, match="64"):
        m(torch.rand(1, 3, 64, 64))


# ---------------------------------------------------- external queries


def test_external_queries_self_consistency():
    m = _model().eval()
    with torch.no_grad():
        out = m(_batch(m, 2, seed=7))
        probs = m.classify_external_queries(out.query_features)
    assert torch.allclose(probs, torch.sigmoid(out.class_logits), atol=1e-6)


def test_external_queries_depend_only_on_class_head():
    a = _model(seed=0).eval()
    b = _model(seed=1).eval()
    with torch.no_grad():
        b.class_head.load_state_dict(a.class_head.state_dict())
        q = torch.randn(2, a.config.num_queries, a.config.feature_dim)
        assert torch.equal(a.classify_external_queries(q), b.classify_external_queries(q))


def test_external_queries_diverge_across_models():
    # teacher queries through an untrained second head: KL strictly positive
    teacher = _model(seed=0).eval()
    student = _model(seed=1).eval()
    with torch.no_grad():
        q = teacher(_batch(teacher, 2, seed=11)).query_features
        p_t = teacher.classify_external_queries(q)
        p_s = student.classify_external_queries(q)
    from stepdet.losses import class_distill

    assert float(class_distill(p_t, p_s)) > 0


def test_external_queries_reject_bad_dim():
    m = _model().eval()
    with pytest.raises(ValueError, match="feature"):
        m.classify_external_queries(torch.randn(1, 8, 17))


# ---------------------------------------------------------- partition


def test_partition_is_complete_and_disjoint():
    m = _model()
    part = m.partition()
    agnostic, specific = set(part["class_agnostic"]), set(part["class_specific"])
    assert agnostic.isdisjoint(specific)
    assert agnostic | specific == {n for n, _ in m.named_parameters()}
    assert len(agnostic) + len(specific) == sum(1 for _ in m.parameters())


def test_partition_prefixes():
    m = _model()
    part = m.partition()
    for name in part["class_specific"]:
        assert name.startswith(CLASS_SPECIFIC_PREFIXES)
    for name in part["class_agnostic"]:
        assert not name.startswith(CLASS_SPECIFIC_PREFIXES)


def test_class_specific_set_is_nonempty_and_small():
    part = _model().partition()
    n_spec = len(part["class_specific"])
    assert 0 < n_spec < len(part["class_agnostic"])


# ------------------------------------------------------------ freezing


def _one_train_step(m: ShapeDetector, lr=1e-2, seed=2):
    opt = torch.optim.SGD(trainable_parameters(m), lr=lr)
    out = m(_batch(m, 2, seed=seed))
    loss = out.class_logits.square().mean() + out.boxes.square().mean()
    loss.backward()
    opt.step()


def test_freeze_keeps_class_agnostic_bit_identical():
    m = _model()
    set_trainable(m, TRAINABLE_CLASS_SPECIFIC)
    before = {
        n: p.detach().clone()
        for n, p in m.named_parameters()
        if not n.startswith(CLASS_SPECIFIC_PREFIXES)
    }
    for _ in range(3):
        _one_train_step(m)
    for n, p in m.named_parameters():
        if n in before:
            assert torch.equal(p.detach(), before[n]), n


def test_freeze_updates_class_specific():
    m = _model()
    set_trainable(m, TRAINABLE_CLASS_SPECIFIC)
    before = {
        n: p.detach().clone()
        for n, p in m.named_parameters()
        if n.startswith(CLASS_SPECIFIC_PREFIXES)
    }
    _one_train_step(m)
    changed = any(not torch.equal(p.detach(), before[n])
                  for n, p in m.named_parameters() if n in before)
    assert changed


def test_frozen_parameters_receive_no_gradient():
    m = _model()
    set_trainable(m, TRAINABLE_CLASS_SPECIFIC)
    out = m(_batch(m, 2))
    out.class_logits.sum().backward()
    for n, p in m.named_parameters():
        if not n.startswith(CLASS_SPECIFIC_PREFIXES):
            assert p.grad is None, n


def test_trainable_all_restores_every_parameter():
    m = _model()
    set_trainable(m, TRAINABLE_CLASS_SPECIFIC)
    set_trainable(m, TRAINABLE_ALL)
    assert all(p.requires_grad for p in m.parameters())
    assert len(trainable_parameters(m)) == sum(1 for _ in m.parameters())


def test_set_trainable_rejects_unknown_selector():
    with pytest.raises(ValueError, match="selector"):
        set_trainable(_model(), "heads_only")


# ------------------------------------------------------------ snapshot


def test_snapshot_is_independent_of_later_training():
    m = _model()
    set_trainable(m, TRAINABLE_ALL)
    frozen = snapshot(m)
    x = _batch(m, 2, seed=13)
    with torch.no_grad():
        ref = frozen(x)
    for _ in range(10):
        _one_train_step(m)
    with torch.no_grad():
        after = frozen(x)
    assert torch.equal(ref.class_logits, after.class_logits)
    assert torch.equal(ref.boxes, after.boxes)


def test_snapshot_parameters_match_and_are_frozen():
    m = _model()
    s = snapshot(m)
    for (n, p), (n2, q) in zip(m.named_parameters(), s.named_parameters()):
        assert n == n2
        assert torch.equal(p.detach(), q.detach())
        assert not q.requires_grad
    assert not s.training


def test_snapshot_idempotent():
    s1 = snapshot(_model())
    s2 = snapshot(s1)
    for (n, p), (_, q) in zip(s1.named_parameters(), s2.named_parameters()):
        assert torch.equal(p, q), n


def test_copy_initialized_model_matches_source_before_training():
    expert = _model(seed=4).eval()
    unified = copy.deepcopy(expert).eval()
    x = _batch(expert, 2, seed=15)
    with torch.no_grad():
        a, b = expert(x), unified(x)
    assert torch.equal(a.class_logits, b.class_logits)
    assert torch.equal(a.boxes, b.boxes)


# ---------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    m = _model(seed=8).eval()
    path = tmp_path / "det.pt"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path).eval()
    assert loaded.config == m.config
    for (n, p), (_, q) in zip(m.named_parameters(), loaded.named_parameters()):
        assert torch.equal(p, q), n
    x = _batch(m, 2, seed=17)
    with torch.no_grad():
        a, b = m(x), loaded(x)
    assert torch.equal(a.class_logits, b.class_logits)


def test_checkpoint_keys_follow_partition(tmp_path):
    m = _model()
    path = tmp_path / "det.pt"
    save_checkpoint(m, path)
    blob = torch.load(path, weights_only=True)
    spec_names = set(blob["class_specific"])
    agn_names = set(blob["class_agnostic"])
    part = m.partition()
    assert spec_names == set(part["class_specific"])
    assert agn_names == set(part["class_agnostic"])


# --------------------------------------------------------------- misc


def test_position_encoding_shape_and_determinism():
    a = sine_position_encoding(8, 8, 32)
    b = sine_position_encoding(8, 8, 32)
    assert a.shape == (64, 32)
    assert torch.equal(a, b)
    assert float(a.abs().max()) <= 1.0 + 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(num_classes=0)
    with pytest.raises(ValueError):
        DetectorConfig(num_classes=5, feature_dim=30, num_heads=4)  # dim % heads
    with pytest.raises(ValueError):
        DetectorConfig(num_classes=5, image_size=60)  # not divisible by strides
