"""Multi-worker execution: wire format, partitioning, numerical
equivalence with single-process runs, traffic accounting, and protocol
violations."""

import math
import struct

import numpy as np
import pytest

from hsvit.blocks import cross_entropy
from hsvit.errors import ConfigError, FormatError, ProtocolError
from hsvit.executor import (
    CONCURRENT,
    MSG_CLS_FORWARD,
    MSG_CLS_GRAD,
    SEQUENTIAL_SIM,
    DistributedExecutor,
    ExecutionMode,
    MessageChannel,
    WorkerMessage,
    expected_step_bytes,
    message_overhead_bytes,
    plan_partition,
)
from hsvit.model import HSViTModel, ModelConfig
from hsvit.tensor import Tensor, no_grad


def exec_config(**overrides):
    base = dict(
        input_size=(16, 16),
        num_classes=3,
        kernels_per_block=[8, 16],
        pool_factors=[2, 2],
        num_attention_groups=8,
        embedding_dim=16,
        attn_depth=1,
        num_heads=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_executor(seed=0, k=2, mode=None, **overrides):
    model = HSViTModel.build(exec_config(**overrides), seed=seed)
    return model, DistributedExecutor(model, k, mode)


# ---------------------------------------------------------------------------
# wire format


def test_message_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    payload = [(3, rng.standard_normal(16)), (7, rng.standard_normal(16))]
    msg = WorkerMessage(MSG_CLS_FORWARD, 2, 41, payload)
    back = WorkerMessage.decode(msg.encode())
    assert (back.kind, back.source, back.step) == (MSG_CLS_FORWARD, 2, 41)
    assert [g for g, _ in back.payload] == [3, 7]
    for (_, a), (_, b) in zip(payload, back.payload):
        np.testing.assert_array_equal(a, b)


def test_message_exact_byte_layout():
    vec = np.array([1.5, -2.0])
    msg = WorkerMessage(MSG_CLS_GRAD, 1, 7, [(5, vec)])
    expected = (
        struct.pack("<B", 2)
        + struct.pack("<H", 1)
        + struct.pack("<I", 7)
        + struct.pack("<H", 1)
        + struct.pack("<H", 5)
        + struct.pack("<2d", 1.5, -2.0)
    )
    assert msg.encode() == expected
    assert len(expected) == 9 + 2 + 16


def test_message_decode_rejects_malformed():
    good = WorkerMessage(MSG_CLS_FORWARD, 0, 1, [(0, np.zeros(4))]).encode()
    with pytest.raises(FormatError):
        WorkerMessage.decode(good[:5])
    with pytest.raises(FormatError):
        WorkerMessage.decode(good + b"\x00")
    bad_kind = b"\x09" + good[1:]
    with pytest.raises(FormatError):
        WorkerMessage.decode(bad_kind)
    control_with_body = WorkerMessage(3, 0, 1, []).encode() + b"\x00\x00"
    with pytest.raises(FormatError):
        WorkerMessage.decode(control_with_body)


def test_expected_step_bytes_formula():
    # 2*K_g*d*8 payload + 2K message headers (9 bytes) + 2K_g group indices
    assert expected_step_bytes(2, 4, 8) == 2 * 4 * 8 * 8 + 4 * 9 + 8 * 2
    assert message_overhead_bytes(2, 3) == 2 * 9 + 3 * 2


# ---------------------------------------------------------------------------
# partitioning


def test_plan_partition_contiguous_split():
    cfg = exec_config(num_attention_groups=16, kernels_per_block=[16, 16])
    specs = plan_partition(cfg, 4)
    assert [s.owned_groups for s in specs] == [
        [0, 1, 2, 3],
        [4, 5, 6, 7],
        [8, 9, 10, 11],
        [12, 13, 14, 15],
    ]
    assert [s.is_aggregator for s in specs] == [True, False, False, False]
    n = cfg.tokens_per_group
    assert [s.owned_kernel_range for s in specs] == [
        (0, 4 * n),
        (4 * n, 8 * n),
        (8 * n, 12 * n),
        (12 * n, 16 * n),
    ]


def test_plan_partition_single_and_full():
    cfg = exec_config()
    solo = plan_partition(cfg, 1)
    assert len(solo) == 1 and solo[0].owned_groups == list(range(8))
    each = plan_partition(cfg, 8)
    assert [s.owned_groups for s in each] == [[g] for g in range(8)]


def test_plan_partition_invalid_k_lists_divisors():
    with pytest.raises(ConfigError, match=r"\[1, 2, 4, 8\]"):
        plan_partition(exec_config(), 3)
    with pytest.raises(ConfigError):
        plan_partition(exec_config(), 0)


def test_plan_partition_soundness_sweep():
    for k_g in range(1, 33):
        cfg = ModelConfig(
            input_size=(4, 4),
            num_classes=2,
            kernels_per_block=[2 * k_g],
            pool_factors=[1],
            num_attention_groups=k_g,
            embedding_dim=16,
            attn_depth=1,
            num_heads=2,
        )
        for k in range(1, k_g + 1):
            if k_g % k:
                continue
            specs = plan_partition(cfg, k)
            groups = [g for s in specs for g in s.owned_groups]
            assert groups == list(range(k_g))
            kernel_edges = [s.owned_kernel_range for s in specs]
            assert kernel_edges[0][0] == 0
            assert kernel_edges[-1][1] == cfg.num_embeddings
            for (a, b), (c, d) in zip(kernel_edges, kernel_edges[1:]):
                assert b == c and a < b and c < d


def test_plan_partition_rejects_shared_modes_for_multi_worker():
    with pytest.raises(ConfigError, match="shared attention"):
        plan_partition(exec_config(shared_attention=True), 2)
    assert len(plan_partition(exec_config(shared_attention=True), 1)) == 1
    cfg = exec_config(
        ablate_conv=True, patch_size=4, num_attention_groups=8, embedding_dim=16
    )
    with pytest.raises(ConfigError, match="patch"):
        plan_partition(cfg, 2)


# ---------------------------------------------------------------------------
# forward/backward equivalence against the single-process oracle


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_distributed_forward_matches_single_process(k):
    model, executor = make_executor(seed=1, k=k)
    rng = np.random.default_rng(10)
    with executor:
        for _ in range(3):
            x = rng.standard_normal((3, 16, 16))
            got = executor.forward(x)
            with no_grad():
                want = model.forward(Tensor(x)).data
            np.testing.assert_array_equal(got, want)


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_distributed_backward_matches_single_process(k):
    model, executor = make_executor(seed=2, k=k)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 16, 16))
    label = 1

    # single-process oracle gradients
    for _, p in model.named_parameters():
        p.zero_grad()
    loss = cross_entropy(model.forward(Tensor(x)), label)
    loss.backward()
    want = {name: p.grad.copy() for name, p in model.named_parameters()}

    with executor:
        fwd = executor.forward_training(x)
        executor.backward_from_loss(fwd, cross_entropy(fwd.logits, label))
        for _, name, p in executor.named_worker_parameters():
            assert p.grad is not None, name
            np.testing.assert_array_equal(p.grad, want[name])


def test_cls_gradient_is_head_input_gradient_over_groups():
    model, executor = make_executor(seed=3, k=2)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, 16, 16))
    with executor:
        fwd = executor.forward_training(x)
        onehot = np.zeros(3)
        onehot[2] = 1.0
        executor.backward(fwd, onehot)
        expected = model.head.weight.data[:, 2] / 8.0  # d(logit_2)/d(pooled) / K_g
        for g, leaf in fwd.leaves.items():
            np.testing.assert_allclose(leaf.grad, expected, atol=1e-15)


def test_zero_logit_gradient_gives_zero_param_grads():
    _, executor = make_executor(seed=4, k=2)
    rng = np.random.default_rng(13)
    with executor:
        fwd = executor.forward_training(rng.standard_normal((3, 16, 16)))
        executor.backward(fwd, np.zeros(3))
        for _, name, p in executor.named_worker_parameters():
            assert p.grad is not None, name
            np.testing.assert_array_equal(p.grad, np.zeros_like(p.data))


def fixed_dataset(rng, n, classes):
    xs = rng.standard_normal((n, 3, 16, 16))
    ys = np.arange(n) % classes
    return xs, ys


@pytest.mark.parametrize("k", [2, 4, 8])
def test_ten_step_training_matches_k1(k):
    xs, ys = fixed_dataset(np.random.default_rng(20), 20, 3)

    def run(workers):
        model = HSViTModel.build(exec_config(), seed=5)
        with DistributedExecutor(model, workers) as ex:
            ex.make_optimizers(lr=1e-3, weight_decay=1e-2)
            losses = []
            for step in range(10):
                lo = (step * 4) % 20
                m = ex.train_step(xs[lo : lo + 4], ys[lo : lo + 4], lr=1e-3)
                losses.append(m.loss)
            ex.sync_to_model()
            params = {n: p.data.copy() for n, p in model.named_parameters()}
        return losses, params

    base_losses, base_params = run(1)
    losses, params = run(k)
    np.testing.assert_allclose(losses, base_losses, atol=1e-6)
    for name, want in base_params.items():
        np.testing.assert_allclose(params[name], want, atol=1e-9)


def test_initial_loss_near_log_classes():
    _, executor = make_executor(seed=6, k=2, num_classes=3)
    rng = np.random.default_rng(21)
    xs, ys = fixed_dataset(rng, 8, 3)
    with executor:
        executor.make_optimizers(lr=0.0, weight_decay=0.0)
        metrics = executor.train_step(xs, ys, lr=0.0)
    assert abs(metrics.loss - math.log(3.0)) < 0.1


def test_sequential_and_concurrent_modes_agree():
    rng = np.random.default_rng(22)
    xs, ys = fixed_dataset(rng, 8, 3)
    results = {}
    for mode_name in (SEQUENTIAL_SIM, CONCURRENT):
        model = HSViTModel.build(exec_config(), seed=7)
        mode = ExecutionMode(mode=mode_name, seed=0)
        with DistributedExecutor(model, 4, mode) as ex:
            logits = ex.forward(xs[0])
            ex.make_optimizers(lr=1e-3, weight_decay=1e-2)
            for step in range(3):
                ex.train_step(xs[step * 2 : step * 2 + 2], ys[step * 2 : step * 2 + 2], 1e-3)
            ex.sync_to_model()
            results[mode_name] = (
                logits,
                {n: p.data.copy() for n, p in model.named_parameters()},
            )
    seq_logits, seq_params = results[SEQUENTIAL_SIM]
    conc_logits, conc_params = results[CONCURRENT]
    np.testing.assert_array_equal(conc_logits, seq_logits)
    for name, want in seq_params.items():
        np.testing.assert_array_equal(conc_params[name], want)


def test_training_is_deterministic_per_seed():
    rng = np.random.default_rng(23)
    xs, ys = fixed_dataset(rng, 6, 3)

    def run():
        model = HSViTModel.build(exec_config(), seed=8)
        with DistributedExecutor(model, 2) as ex:
            ex.make_optimizers(lr=1e-3, weight_decay=1e-2)
            return [ex.train_step(xs, ys, 1e-3).loss for _ in range(3)]

    assert run() == run()


def test_ablate_attn_distributed_matches_single_process():
    model, executor = make_executor(seed=9, k=4, ablate_attn=True)
    rng = np.random.default_rng(24)
    x = rng.standard_normal((3, 16, 16))
    with executor:
        got = executor.forward(x)
    with no_grad():
        want = model.forward(Tensor(x)).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_sync_to_model_round_trips_parameters():
    rng = np.random.default_rng(25)
    xs, ys = fixed_dataset(rng, 4, 3)
    model, executor = make_executor(seed=10, k=4)
    with executor:
        executor.make_optimizers(lr=1e-2, weight_decay=1e-2)
        executor.train_step(xs, ys, 1e-2)
        executor.sync_to_model()
        x = rng.standard_normal((3, 16, 16))
        got = executor.forward(x)
    with no_grad():
        want = model.forward(Tensor(x)).data
    np.testing.assert_array_equal(got, want)


def test_worker_parameter_ownership_is_disjoint_and_complete():
    model, executor = make_executor(seed=11, k=4)
    with executor:
        names = [name for _, name, _ in executor.named_worker_parameters()]
    assert len(names) == len(set(names))
    assert sorted(names) == sorted(n for n, _ in model.named_parameters())


# ---------------------------------------------------------------------------
# traffic accounting


@pytest.mark.parametrize("k", [1, 2, 4])
def test_train_step_bytes_match_formula(k):
    rng = np.random.default_rng(30)
    model, executor = make_executor(seed=12, k=k)
    cfg = model.config
    with executor:
        executor.make_optimizers(lr=1e-3, weight_decay=0.0)
        m1 = executor.train_step(
            rng.standard_normal((1, 3, 16, 16)), np.array([0]), 1e-3
        )
        assert m1.bytes_sent == expected_step_bytes(k, cfg.num_attention_groups, cfg.embedding_dim)
        m3 = executor.train_step(
            rng.standard_normal((3, 3, 16, 16)), np.array([0, 1, 2]), 1e-3
        )
        assert m3.bytes_sent == 3 * expected_step_bytes(
            k, cfg.num_attention_groups, cfg.embedding_dim
        )


def test_eval_forward_bytes_are_half_a_step():
    model, executor = make_executor(seed=13, k=2)
    cfg = model.config
    rng = np.random.default_rng(31)
    with executor:
        before = executor.channel.bytes_sent
        executor.forward(rng.standard_normal((3, 16, 16)))
        used = executor.channel.bytes_sent - before
    assert used == cfg.num_attention_groups * cfg.embedding_dim * 8 + message_overhead_bytes(
        2, cfg.num_attention_groups
    )


# ---------------------------------------------------------------------------
# protocol violations


def test_grad_without_forward_is_protocol_error():
    _, executor = make_executor(seed=14, k=2)
    with executor:
        worker = executor.workers[1]
        msg = WorkerMessage(MSG_CLS_GRAD, 0, 99, [(4, np.zeros(16))])
        with pytest.raises(ProtocolError, match="without a matching forward"):
            worker.apply_cls_grads(msg)


def test_duplicate_forward_is_protocol_error():
    _, executor = make_executor(seed=15, k=2)
    rng = np.random.default_rng(32)
    x = rng.standard_normal((3, 16, 16))
    with executor:
        executor.workers[0].forward_step(x, 5, train=False)
        executor.workers[0].forward_step(x, 5, train=False)
        with pytest.raises(ProtocolError, match="duplicate"):
            executor._collect_forward(5)


def test_missing_forward_is_protocol_error():
    _, executor = make_executor(seed=16, k=2)
    with executor:
        with pytest.raises(ProtocolError, match="expected 2 messages"):
            executor._collect_forward(1)


def test_stale_step_stamp_is_protocol_error():
    _, executor = make_executor(seed=17, k=2)
    rng = np.random.default_rng(33)
    x = rng.standard_normal((3, 16, 16))
    with executor:
        executor.workers[0].forward_step(x, 9, train=False)
        executor.workers[1].forward_step(x, 9, train=False)
        with pytest.raises(ProtocolError, match="step"):
            executor._collect_forward(10)


def test_wrong_group_set_is_protocol_error():
    _, executor = make_executor(seed=18, k=2)
    with executor:
        executor.channel.send(
            0, WorkerMessage(MSG_CLS_FORWARD, 0, 1, [(7, np.zeros(16))])
        )
        executor.channel.send(
            0,
            WorkerMessage(
                MSG_CLS_FORWARD, 1, 1, [(g, np.zeros(16)) for g in range(4, 8)]
            ),
        )
        with pytest.raises(ProtocolError, match="owns"):
            executor._collect_forward(1)


def test_concurrent_timeout_is_protocol_error():
    channel = MessageChannel(1, concurrent=True, timeout_s=0.05)
    with pytest.raises(ProtocolError, match="timed out"):
        channel.receive(0, 1)


def test_execution_mode_validation():
    with pytest.raises(ConfigError):
        ExecutionMode(mode="warp_speed")
    with pytest.raises(ConfigError):
        ExecutionMode(timeout_s=0.0)
