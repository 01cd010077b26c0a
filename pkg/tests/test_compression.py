import copy

import numpy as np
import pytest
import torch

from speatforge import compression as comp
from speatforge.model import (
    MaskParams,
    ModelConfig,
    NAMED_CONFIGS,
    extract_representations,
    init_model,
    make_train_state,
    pretrain_step,
)


def brute_force_head_choice(model, layer_index, n_remove):
    """Exhaustive lowest-L1 head pick, recomputed with plain loops."""
    cfg = model.config
    layer = model.layers[layer_index]
    dh = cfg.head_dim
    scores = []
    for h in range(cfg.n_heads):
        if not bool(model.head_mask[layer_index, h]):
            continue
        total = 0.0
        for lin in (layer.q, layer.k, layer.v):
            total += lin.weight[h * dh:(h + 1) * dh, :].abs().sum().item()
            total += lin.bias[h * dh:(h + 1) * dh].abs().sum().item()
        total += layer.o.weight[:, h * dh:(h + 1) * dh].abs().sum().item()
        scores.append((total, h))
    scores.sort()
    return sorted(h for _, h in scores[:n_remove])


def brute_force_row_choice(model, layer_index, n_remove):
    layer = model.layers[layer_index]
    scores = []
    for r in range(model.config.ffw_dim):
        if not bool(model.row_mask[layer_index, r]):
            continue
        total = layer.fc1.weight[r, :].abs().sum().item()
        total += layer.fc2.weight[:, r].abs().sum().item()
        scores.append((total, r))
    scores.sort()
    return sorted(r for _, r in scores[:n_remove])


def toy_model(rng, n_layers=2, n_heads=4, ffw=8, hidden=8):
    cfg = ModelConfig(n_layers=n_layers, hidden_dim=hidden, ffw_dim=ffw,
                      n_heads=n_heads, n_clusters=4, input_dim=4)
    return init_model(cfg, seed=int(rng.integers(0, 2**31)))


def test_prune_heads_noop_and_errors(rng):
    model = toy_model(rng)
    before = copy.deepcopy(model.state_dict())
    removed = comp.prune_heads(model, 0)
    assert removed == [[], []]
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
    with pytest.raises(ValueError, match="cannot prune"):
        comp.prune_heads(model, 5)


def test_prune_heads_matches_brute_force(rng):
    for _ in range(40):
        model = toy_model(rng)
        expected = [brute_force_head_choice(model, li, 1)
                    for li in range(model.config.n_layers)]
        removed = comp.prune_heads(model, 1)
        assert removed == expected
        # second event on the now-masked model still agrees
        expected2 = [brute_force_head_choice(model, li, 2)
                     for li in range(model.config.n_layers)]
        removed2 = comp.prune_heads(model, 2)
        assert removed2 == expected2


def test_prune_heads_tie_breaks_low_index(rng):
    model = toy_model(rng)
    with torch.no_grad():
        for layer in model.layers:
            for _, lin in layer.prunable_linears():
                lin.weight.fill_(0.25)
                lin.bias.fill_(0.25)
    removed = comp.prune_heads(model, 2)
    assert removed == [[0, 1], [0, 1]]


def test_prune_heads_base_config_tick():
    model = init_model(NAMED_CONFIGS["base"], seed=0)
    assert comp.remaining_heads(model) == 144
    comp.prune_heads(model, 1)
    assert comp.remaining_heads(model) == 132


def test_pruned_head_output_is_zeroed(rng):
    model = toy_model(rng)
    mel = rng.normal(size=(6, 4))
    removed = comp.prune_heads(model, 1)
    dh = model.config.head_dim
    for li, heads in enumerate(removed):
        layer = model.layers[li]
        for h in heads:
            sl = slice(h * dh, (h + 1) * dh)
            assert torch.all(layer.q.weight[sl, :] == 0)
            assert torch.all(layer.o.weight[:, sl] == 0)
    reps = extract_representations(model, mel)
    assert all(np.isfinite(r).all() for r in reps)


def test_prune_rows_matches_brute_force(rng):
    for _ in range(40):
        model = toy_model(rng, ffw=12)
        expected = [brute_force_row_choice(model, li, 3)
                    for li in range(model.config.n_layers)]
        removed = comp.prune_rows(model, 3)
        assert removed == expected
        expected2 = [brute_force_row_choice(model, li, 2)
                     for li in range(model.config.n_layers)]
        assert comp.prune_rows(model, 2) == expected2


def test_prune_rows_counts_only_unpruned(rng):
    model = toy_model(rng, ffw=8)
    first = comp.prune_rows(model, 3)
    second = comp.prune_rows(model, 3)
    for a, b in zip(first, second):
        assert not set(a) & set(b)
    assert comp.remaining_rows(model) == model.config.n_layers * 2
    with pytest.raises(ValueError, match="cannot prune"):
        comp.prune_rows(model, 2)  # only 2 left per layer; one must survive


def test_prune_rows_zeroes_pair(rng):
    model = toy_model(rng, ffw=8)
    removed = comp.prune_rows(model, 2)
    for li, rows in enumerate(removed):
        layer = model.layers[li]
        for r in rows:
            assert torch.all(layer.fc1.weight[r, :] == 0)
            assert layer.fc1.bias[r] == 0
            assert torch.all(layer.fc2.weight[:, r] == 0)


def test_pruning_strictly_reduces_nonzero_count(rng):
    model = toy_model(rng, ffw=12)
    counts = [model.nonzero_parameters()]
    comp.prune_heads(model, 1)
    counts.append(model.nonzero_parameters())
    comp.prune_rows(model, 2)
    counts.append(model.nonzero_parameters())
    comp.weight_prune_event(model, 0.2)
    counts.append(model.nonzero_parameters())
    assert all(b < a for a, b in zip(counts, counts[1:]))
    # re-applying masks is idempotent
    state = copy.deepcopy(model.state_dict())
    model.apply_masks()
    for k, v in model.state_dict().items():
        assert torch.equal(v, state[k])


def test_sparsity_schedule_table():
    assert comp.sparsity_schedule(0.0) == 0.20
    assert comp.sparsity_schedule(0.19) == 0.20
    assert comp.sparsity_schedule(0.20) == 0.10
    assert comp.sparsity_schedule(0.49) == 0.10
    assert comp.sparsity_schedule(0.50) == 0.05
    assert comp.sparsity_schedule(0.64) == 0.05
    assert comp.sparsity_schedule(0.65) == 0.025
    assert comp.sparsity_schedule(0.69) == 0.025
    assert comp.sparsity_schedule(0.70) == 0.01
    assert comp.sparsity_schedule(0.79) == 0.01
    assert comp.sparsity_schedule(0.80) is None
    with pytest.raises(ValueError):
        comp.sparsity_schedule(1.0)


def test_sparsity_ladder_sequence():
    seq = comp.sparsity_ladder_sequence()
    assert abs(seq[0] - 0.200) < 1e-12
    assert abs(seq[1] - 0.280) < 1e-12
    assert abs(seq[2] - 0.352) < 1e-12
    assert abs(seq[3] - 0.4168) < 1e-12
    assert all(b > a for a, b in zip(seq, seq[1:]))
    assert seq[-1] >= 0.80
    assert len(seq) < 100


def test_weight_prune_matches_sort_oracle(rng):
    model = toy_model(rng)
    values, alive, _ = comp._flat_pool(model)
    n = values.shape[0]
    k = int(round(0.5 * n))
    expected = set(np.argsort(values, kind="stable")[:k])
    comp.weight_prune_event(model, 0.5)
    _, alive_after, _ = comp._flat_pool(model)
    masked = set(np.nonzero(~alive_after)[0])
    assert masked == expected


def test_weight_prune_composition(rng):
    model = toy_model(rng)
    total = model.prunable_parameters()
    comp.weight_prune_event(model, 0.2)
    comp.weight_prune_event(model, 0.2)
    realized = model.masked_parameters() / total
    assert abs(realized - 0.36) < 2.0 / total  # integer rounding only
    # the scheduled recurrence is exact
    s = 0.0
    for _ in range(2):
        s = 1.0 - (1.0 - s) * (1.0 - 0.2)
    assert abs(s - 0.36) < 1e-12


def test_weight_prune_target_sparsity_mode(rng):
    model = toy_model(rng)
    total = model.prunable_parameters()
    comp.weight_prune_event(model, 0.2, target_sparsity=0.2)
    assert model.masked_parameters() == round(0.2 * total)
    comp.weight_prune_event(model, 0.1, target_sparsity=0.28)
    assert model.masked_parameters() == round(0.28 * total)


def test_masked_weights_stay_zero_after_finetune(rng):
    model = toy_model(rng)
    comp.weight_prune_event(model, 0.3)
    masked_before = model.masked_parameters()
    state = make_train_state(model, lr=1e-2, seed=0)
    mels = [rng.normal(size=(10, 4))]
    targets = [rng.integers(0, 4, size=10)]
    pretrain_step(model, state, mels, targets, MaskParams(mask_prob=0.9, span=3))
    assert model.masked_parameters() == masked_before
    for _, lin in model.prunable_linears():
        assert torch.all(lin.weight[~lin.weight_mask] == 0)
        assert torch.all(lin.bias[~lin.bias_mask] == 0)


def test_gate_constant_loss_triggers_at_full_window():
    state = comp.CompressionState(window_steps=150)
    fired = [step for step in range(1, 400)
             if comp.weight_prune_gate(state, 3.0)]
    assert fired[0] == 150  # exactly the first full-window step


def test_gate_linear_ramp_never_triggers():
    window = 150
    state = comp.CompressionState(window_steps=window)
    alpha = state.ema_decay
    b = 0.01
    ema_closed = None
    for step in range(1, 2000):
        loss = 100.0 - b * step
        assert not comp.weight_prune_gate(state, loss)
        # closed form: ema_t = a - b t + (alpha b / (1-alpha)) (1 - alpha^(t-1))
        expected = (100.0 - b * step
                    + (alpha * b / (1.0 - alpha)) * (1.0 - alpha ** (step - 1)))
        assert abs(state.ema_loss - expected) < 1e-9


def test_gate_partial_window_always_false(rng):
    state = comp.CompressionState(window_steps=50)
    for _ in range(49):
        assert not comp.weight_prune_gate(state, float(rng.normal(5.0, 1e-6)))


def test_gate_raw_mode_flag():
    state = comp.CompressionState(window_steps=10, compare_raw=True)
    for step in range(1, 10):
        assert not comp.weight_prune_gate(state, 1.0)
    assert comp.weight_prune_gate(state, 1.0)


def test_head_grid_reference_and_scaled():
    assert comp.head_count_grid(12, 12) == [144, 132, 120, 108, 96, 84, 72,
                                            60, 48, 36, 24, 12]
    assert comp.head_count_grid(2, 4) == [8, 6, 4, 2]


def test_head_event_steps_interval_switch():
    steps = comp.head_event_steps(12, 12, scale=1)
    assert len(steps) == 11
    gaps = [b - a for a, b in zip([0] + steps, steps)]
    # 144 -> 72 at the early cadence, then the late cadence down to 12
    assert gaps[:6] == [25000] * 6
    assert gaps[6:] == [40000] * 5
    scaled = comp.head_event_steps(12, 12, scale=100)
    assert [g for g in np.diff([0] + scaled)][:6] == [250] * 6


def test_row_grid_reference_and_scaled():
    assert comp.row_count_grid(3072) == [2560, 2048, 1536, 1024, 512]
    assert comp.row_event_size(3072) == 128
    assert comp.row_stop_remaining(3072) == 512
    assert comp.row_count_grid(48) == [40, 32, 24, 16, 8]
    assert comp.row_event_size(768) == 32  # auto-scaled for narrow FFWs


def test_prune_event_round_trip():
    ev = comp.PruneEvent(step=12, method="head", units=1.0, sparsity_after=0.05,
                         removed=((1, 3), (0,)), forced=True)
    assert comp.PruneEvent.from_dict(ev.to_dict()) == ev


def test_distill_self_fixed_point(rng):
    cfg = ModelConfig(n_layers=2, hidden_dim=16, ffw_dim=24, n_heads=2,
                      n_clusters=4, input_dim=6)
    teacher = init_model(cfg, seed=3, dtype=torch.float64)
    student = comp.StudentModel(cfg, cfg.hidden_dim, target_layers=(2,)).double()
    student.encoder.load_state_dict(teacher.state_dict())
    with torch.no_grad():
        student.heads[0].weight.copy_(torch.eye(cfg.hidden_dim, dtype=torch.float64))
        student.heads[0].bias.zero_()
    mels = [rng.normal(size=(7, 6))]
    loss = comp.distill_loss(student, teacher, mels)
    assert abs(float(loss.detach())) < 1e-9


def test_distill_smoke_loss_decreases(rng):
    cfg = ModelConfig(n_layers=2, hidden_dim=16, ffw_dim=24, n_heads=2,
                      n_clusters=4, input_dim=6)
    teacher = init_model(cfg, seed=42)
    mels = [rng.normal(size=(20, 6)) for _ in range(10)]
    student, history = comp.distill(teacher, student_layers=2, mels=mels,
                                    steps=200, seed=42, batch_size=8)
    assert history[-1] < history[0]


def test_distill_teacher_untouched_and_targets(rng):
    cfg = ModelConfig(n_layers=6, hidden_dim=16, ffw_dim=24, n_heads=2,
                      n_clusters=4, input_dim=6)
    teacher = init_model(cfg, seed=1)
    snapshot = copy.deepcopy(teacher.state_dict())
    mels = [rng.normal(size=(10, 6)) for _ in range(4)]
    assert comp.default_distill_targets(12) == (4, 12)
    assert comp.default_distill_targets(6) == (2, 6)
    student, _ = comp.distill(teacher, student_layers=2, mels=mels, steps=2, seed=0)
    for k, v in teacher.state_dict().items():
        assert torch.equal(v, snapshot[k])
    assert student.target_layers == (2, 6)
    assert len(student.heads) == 2
    with pytest.raises(ValueError, match="target layer"):
        comp.distill(teacher, 2, mels, steps=1, target_layers=(7,))
    with pytest.raises(ValueError, match="empty corpus"):
        comp.distill(teacher, 2, [], steps=1)


def test_distilled_students_feed_bias_pipeline(rng):
    from speatforge import speat

    cfg = ModelConfig(n_layers=6, hidden_dim=16, ffw_dim=24, n_heads=2,
                      n_clusters=4, input_dim=6)
    teacher = init_model(cfg, seed=2)
    mels = [rng.normal(size=(10, 6)) for _ in range(4)]
    for n_layers in (2, 4, 6):
        student, _ = comp.distill(teacher, n_layers, mels, steps=1, seed=0)
        seqs = {}
        for tag in ("x0", "x1", "y0", "y1", "a0", "a1", "b0", "b1"):
            reps = extract_representations(student.encoder, rng.normal(size=(5, 6)))
            seqs[tag] = speat.EmbeddingSequence(layers=tuple(reps), stimulus_id=tag)
        test = speat.BiasTest("iface", X=[seqs["x0"], seqs["x1"]],
                              Y=[seqs["y0"], seqs["y1"]],
                              A=[seqs["a0"], seqs["a1"]],
                              B=[seqs["b0"], seqs["b1"]])
        report = speat.effect_size(test)
        assert np.isfinite(report.d_aggregate)
        assert len(report.d_per_layer) == n_layers + 1
