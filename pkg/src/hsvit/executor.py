"""Simulated multi-worker execution of the grouped model.

K workers each own a contiguous slice of attention groups together with
those groups' conv towers, attention stacks, and CLS parameters; worker 0
additionally owns the head and acts as the aggregator.  Per sample, every
worker (worker 0 included) sends one CLS_FORWARD message through the
channel, the aggregator averages the group vectors and computes logits,
and one CLS_GRAD message per worker carries the per-group gradients back.
Parameters never cross workers; the channel's byte counter therefore
measures the entire communication cost of a step.

Messages travel as encoded bytes even between in-process workers, so the
traffic accounting reflects the documented wire layout exactly.
"""

from __future__ import annotations

import queue
import struct
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .blocks import AdamW, cross_entropy
from .errors import ConfigError, FormatError, ProtocolError, UsageError
from .model import (
    AttentionGroup,
    HSViTModel,
    ModelConfig,
    aggregate_predict,
    group_forward,
)
from .tensor import Tensor, mean0, no_grad

MSG_CLS_FORWARD = 1
MSG_CLS_GRAD = 2
MSG_CONTROL = 3
_VALID_KINDS = (MSG_CLS_FORWARD, MSG_CLS_GRAD, MSG_CONTROL)

SEQUENTIAL_SIM = "sequential_sim"
CONCURRENT = "concurrent"

_HEADER = struct.Struct("<BHIH")  # kind, source, step, group count
_GROUP_INDEX = struct.Struct("<H")


@dataclass
class WorkerMessage:
    """One protocol message; payload pairs group indices with vectors."""

    kind: int
    source: int
    step: int
    payload: list  # list of (group_index, np.ndarray [d])

    def encode(self) -> bytes:
        parts = [_HEADER.pack(self.kind, self.source, self.step, len(self.payload))]
        for g, vec in self.payload:
            parts.append(_GROUP_INDEX.pack(g))
            parts.append(np.ascontiguousarray(vec, dtype="<f8").tobytes())
        return b"".join(parts)

    @staticmethod
    def decode(blob: bytes) -> "WorkerMessage":
        if len(blob) < _HEADER.size:
            raise FormatError("message shorter than its header")
        kind, source, step, count = _HEADER.unpack_from(blob, 0)
        if kind not in _VALID_KINDS:
            raise FormatError(f"unknown message kind {kind}")
        body = len(blob) - _HEADER.size
        if count == 0:
            if body:
                raise FormatError("control message carries unexpected payload bytes")
            return WorkerMessage(kind, source, step, [])
        if body % count:
            raise FormatError(f"{body} payload bytes do not split into {count} groups")
        per_group = body // count
        dim8 = per_group - _GROUP_INDEX.size
        if dim8 <= 0 or dim8 % 8:
            raise FormatError(f"group record of {per_group} bytes has no valid vector")
        dim = dim8 // 8
        payload = []
        offset = _HEADER.size
        for _ in range(count):
            (g,) = _GROUP_INDEX.unpack_from(blob, offset)
            offset += _GROUP_INDEX.size
            vec = np.frombuffer(blob, dtype="<f8", offset=offset, count=dim).astype(np.float64)
            offset += 8 * dim
            payload.append((g, vec))
        return WorkerMessage(kind, source, step, payload)


def message_overhead_bytes(num_messages: int, num_group_records: int) -> int:
    """Header bytes for a given traffic pattern, excluding vector payloads."""
    return num_messages * _HEADER.size + num_group_records * _GROUP_INDEX.size


def expected_step_bytes(k: int, k_g: int, dim: int) -> int:
    """Exact channel bytes for one training sample: CLS forward plus grad."""
    return 2 * k_g * dim * 8 + message_overhead_bytes(2 * k, 2 * k_g)


@dataclass
class WorkerSpec:
    worker_id: int
    owned_groups: list
    owned_kernel_range: tuple
    is_aggregator: bool


@dataclass
class ExecutionMode:
    mode: str = SEQUENTIAL_SIM
    seed: int = 0
    timeout_s: float = 30.0

    def __post_init__(self):
        if self.mode not in (SEQUENTIAL_SIM, CONCURRENT):
            raise ConfigError(
                f"mode must be '{SEQUENTIAL_SIM}' or '{CONCURRENT}', got '{self.mode}'"
            )
        if self.timeout_s <= 0:
            raise ConfigError(f"timeout_s must be positive, got {self.timeout_s}")

    @property
    def concurrent(self) -> bool:
        return self.mode == CONCURRENT


def plan_partition(config: ModelConfig, k: int) -> list:
    """Assign contiguous group (and kernel) ranges to K workers."""
    k_g = config.num_attention_groups
    if k < 1 or k_g % k:
        valid = [d for d in range(1, k_g + 1) if k_g % d == 0]
        raise ConfigError(f"{k} workers cannot split {k_g} attention groups; valid: {valid}")
    if k > 1 and config.shared_attention:
        raise ConfigError("shared attention parameters cannot be partitioned across workers")
    if k > 1 and config.ablate_conv:
        raise ConfigError("the patch-embedding fallback is shared and requires a single worker")
    per_worker = k_g // k
    n = config.tokens_per_group
    specs = []
    for w in range(k):
        groups = list(range(w * per_worker, (w + 1) * per_worker))
        kernel_range = (groups[0] * n, (groups[-1] + 1) * n)
        specs.append(WorkerSpec(w, groups, kernel_range, w == 0))
    return specs


class MessageChannel:
    """Per-destination mailboxes carrying encoded messages.

    Every send is counted, including a worker delivering to itself; the
    protocol deliberately routes all CLS traffic through the channel so
    the byte counter equals the full communication cost of a step.
    """

    def __init__(self, num_workers: int, concurrent: bool, timeout_s: float):
        self._concurrent = concurrent
        self._timeout = timeout_s
        if concurrent:
            self._boxes = [queue.Queue() for _ in range(num_workers)]
        else:
            self._boxes = [deque() for _ in range(num_workers)]
        self.bytes_sent = 0
        self.messages_sent = 0
        self._lock = threading.Lock()

    def send(self, dst: int, message: WorkerMessage) -> None:
        blob = message.encode()
        with self._lock:
            self.bytes_sent += len(blob)
            self.messages_sent += 1
        if self._concurrent:
            self._boxes[dst].put(blob)
        else:
            self._boxes[dst].append(blob)

    def receive(self, dst: int, count: int) -> list:
        out = []
        for _ in range(count):
            if self._concurrent:
                try:
                    blob = self._boxes[dst].get(timeout=self._timeout)
                except queue.Empty:
                    raise ProtocolError(
                        f"worker {dst} timed out after {self._timeout}s waiting for "
                        f"{count - len(out)} of {count} messages"
                    ) from None
            else:
                if not self._boxes[dst]:
                    raise ProtocolError(
                        f"worker {dst} expected {count} messages but only {len(out)} arrived"
                    )
                blob = self._boxes[dst].popleft()
            out.append(WorkerMessage.decode(blob))
        return out


class Worker:
    """One simulated device: a group slice plus its private parameters."""

    def __init__(self, spec: WorkerSpec, config: ModelConfig, channel: MessageChannel):
        self.spec = spec
        self.config = config
        self.channel = channel
        self.towers = {}
        self.attn_stacks = {}
        self.cls_tokens = {}
        self.patch_embed = None
        self.head = None
        self.named_params = []
        self._pending = {}
        self.optimizer = None

    @classmethod
    def from_model(cls, model: HSViTModel, spec: WorkerSpec, channel: MessageChannel) -> "Worker":
        w = cls(spec, model.config, channel)
        cfg = model.config
        if cfg.ablate_conv:
            w.patch_embed = model.patch_embed.clone()
            w.named_params.extend((f"patch.{n}", p) for n, p in w.patch_embed.parameters())
        else:
            for g in spec.owned_groups:
                tower = [b.clone() for b in model.towers[g]]
                w.towers[g] = tower
                for b, block in enumerate(tower):
                    w.named_params.extend(
                        (f"group.{g}.conv.{b}.{n}", p) for n, p in block.parameters()
                    )
        if not cfg.ablate_attn:
            if cfg.shared_attention:
                stack = [blk.clone() for blk in model.attn_stacks[0]]
                for g in spec.owned_groups:
                    w.attn_stacks[g] = stack
                for j, block in enumerate(stack):
                    w.named_params.extend((f"attn.{j}.{n}", p) for n, p in block.parameters())
            else:
                for g in spec.owned_groups:
                    stack = [blk.clone() for blk in model.attn_stacks[g]]
                    w.attn_stacks[g] = stack
                    for j, block in enumerate(stack):
                        w.named_params.extend(
                            (f"group.{g}.attn.{j}.{n}", p) for n, p in block.parameters()
                        )
            for g in spec.owned_groups:
                token = model.cls_tokens[g].clone()
                w.cls_tokens[g] = token
                w.named_params.append((f"group.{g}.cls", token))
        if spec.is_aggregator:
            w.head = model.head.clone()
            w.named_params.extend((f"head.{n}", p) for n, p in w.head.parameters())
        return w

    def make_optimizer(self, lr: float, weight_decay: float) -> None:
        self.optimizer = AdamW(self.named_params, lr=lr, weight_decay=weight_decay)

    def _group_vector(self, x: Tensor, g: int) -> Tensor:
        """The d-vector this group contributes to aggregation."""
        if self.config.ablate_conv:
            from .tensor import extract_patches, narrow

            tokens_all = self.patch_embed(extract_patches(x, self.config.patch_size))
            n = self.config.tokens_per_group
            tokens = narrow(tokens_all, 0, g * n, n)
        else:
            z = x
            for block in self.towers[g]:
                z = block.forward(z)
            tokens = z.reshape(z.shape[0], self.config.embedding_dim)
        if self.config.ablate_attn:
            return mean0(tokens)
        group = AttentionGroup(g, tokens, self.cls_tokens[g])
        return group_forward(group, self.attn_stacks[g])

    def forward_step(self, x_data: np.ndarray, step: int, train: bool) -> None:
        """Compute owned groups' vectors and send one CLS_FORWARD message."""
        x = Tensor(x_data)
        payload = []
        if train:
            nodes = {}
            for g in self.spec.owned_groups:
                vec = self._group_vector(x, g)
                nodes[g] = vec
                payload.append((g, vec.data.copy()))
            self._pending[step] = nodes
        else:
            with no_grad():
                for g in self.spec.owned_groups:
                    payload.append((g, self._group_vector(x, g).data.copy()))
        self.channel.send(0, WorkerMessage(MSG_CLS_FORWARD, self.spec.worker_id, step, payload))

    def apply_cls_grads(self, message: WorkerMessage) -> None:
        """Seed the pending group graphs with received CLS gradients."""
        if message.kind != MSG_CLS_GRAD:
            raise ProtocolError(f"worker {self.spec.worker_id} expected CLS_GRAD, got kind {message.kind}")
        nodes = self._pending.pop(message.step, None)
        if nodes is None:
            raise ProtocolError(
                f"worker {self.spec.worker_id} received gradients for step {message.step} "
                f"without a matching forward"
            )
        got = [g for g, _ in message.payload]
        if got != sorted(nodes):
            raise ProtocolError(
                f"gradient payload covers groups {got}, expected {sorted(nodes)}"
            )
        for g, vec in message.payload:
            nodes[g].backward(vec)

    def optimizer_step(self, lr: float) -> None:
        if self.optimizer is None:
            raise UsageError("worker has no optimizer; call make_optimizer first")
        self.optimizer.lr = lr
        self.optimizer.step()

    def zero_grads(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()


@dataclass
class TrainingForward:
    """Aggregator-side state linking one forward pass to its backward."""

    step: int
    logits: Tensor
    leaves: dict  # group index -> leaf Tensor fed into aggregation
    sources: dict = field(default_factory=dict)  # group index -> worker id


@dataclass
class StepMetrics:
    loss: float
    accuracy: float
    bytes_sent: int
    samples: int


class DistributedExecutor:
    """Drives K workers through forward, backward, and optimizer phases."""

    def __init__(self, model: HSViTModel, num_workers: int, mode: ExecutionMode = None):
        self.mode = mode or ExecutionMode()
        self.model = model
        self.specs = plan_partition(model.config, num_workers)
        self.channel = MessageChannel(num_workers, self.mode.concurrent, self.mode.timeout_s)
        self.workers = [Worker.from_model(model, spec, self.channel) for spec in self.specs]
        self._pool = (
            ThreadPoolExecutor(max_workers=num_workers) if self.mode.concurrent else None
        )
        self._step_counter = 0

    # -- plumbing ------------------------------------------------------------

    @property
    def aggregator(self) -> Worker:
        return self.workers[0]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def _run_all(self, fn) -> list:
        if self._pool is None:
            return [fn(w) for w in self.workers]
        futures = [self._pool.submit(fn, w) for w in self.workers]
        return [f.result(timeout=self.mode.timeout_s) for f in futures]

    def make_optimizers(self, lr: float, weight_decay: float) -> None:
        for w in self.workers:
            w.make_optimizer(lr, weight_decay)

    def named_worker_parameters(self):
        for w in self.workers:
            for name, p in w.named_params:
                yield w.spec.worker_id, name, p

    def sync_to_model(self) -> None:
        """Copy trained worker parameters back into the reference model."""
        target = dict(self.model.named_parameters())
        for _, name, p in self.named_worker_parameters():
            target[name].data = p.data.copy()

    # -- protocol phases -----------------------------------------------------

    def _collect_forward(self, step: int) -> dict:
        messages = self.channel.receive(0, len(self.workers))
        seen = {}
        for msg in messages:
            if msg.kind != MSG_CLS_FORWARD:
                raise ProtocolError(f"aggregator expected CLS_FORWARD, got kind {msg.kind}")
            if msg.step != step:
                raise ProtocolError(f"message from worker {msg.source} stamps step "
                                    f"{msg.step}, current step is {step}")
            if msg.source in seen:
                raise ProtocolError(f"duplicate CLS_FORWARD from worker {msg.source}")
            if msg.source >= len(self.workers):
                raise ProtocolError(f"message from unknown worker {msg.source}")
            expected = self.specs[msg.source].owned_groups
            got = [g for g, _ in msg.payload]
            if got != expected:
                raise ProtocolError(
                    f"worker {msg.source} sent groups {got}, owns {expected}"
                )
            seen[msg.source] = msg
        vectors = {}
        sources = {}
        for source, msg in seen.items():
            for g, vec in msg.payload:
                vectors[g] = vec
                sources[g] = source
        return {"vectors": vectors, "sources": sources}

    def _aggregate(self, vectors: dict, train: bool):
        # Group vectors are CLS outputs normally, or per-group token means
        # when attention is ablated; aggregation is identical either way.
        ordered = [Tensor(vectors[g], requires_grad=train) for g in sorted(vectors)]
        logits = aggregate_predict(ordered, self.aggregator.head)
        return logits, dict(zip(sorted(vectors), ordered))

    def forward_training(self, x_data: np.ndarray) -> TrainingForward:
        """Distributed forward keeping per-worker graphs alive for backward."""
        self._step_counter += 1
        step = self._step_counter
        self._run_all(lambda w: w.forward_step(x_data, step, train=True))
        collected = self._collect_forward(step)
        logits, leaves = self._aggregate(collected["vectors"], train=True)
        return TrainingForward(step, logits, leaves, collected["sources"])

    def backward(self, fwd: TrainingForward, logit_grad: np.ndarray) -> None:
        """Backpropagate a logits gradient through aggregator and workers."""
        fwd.logits.backward(np.asarray(logit_grad, dtype=np.float64))
        self._send_cls_grads(fwd)

    def backward_from_loss(self, fwd: TrainingForward, loss: Tensor, seed: float = 1.0) -> None:
        """Backpropagate a scalar loss built on top of fwd.logits."""
        loss.backward(np.array(seed))
        self._send_cls_grads(fwd)

    def _send_cls_grads(self, fwd: TrainingForward) -> None:
        for spec in self.specs:
            payload = []
            for g in spec.owned_groups:
                grad = fwd.leaves[g].grad
                if grad is None:
                    raise ProtocolError(f"no gradient reached group {g}'s aggregation leaf")
                payload.append((g, grad.copy()))
            self.channel.send(
                spec.worker_id, WorkerMessage(MSG_CLS_GRAD, 0, fwd.step, payload)
            )
        self._run_all(lambda w: w.apply_cls_grads(self.channel.receive(w.spec.worker_id, 1)[0]))

    def forward(self, x_data: np.ndarray) -> np.ndarray:
        """Inference forward; returns logits as a plain array."""
        self._step_counter += 1
        step = self._step_counter
        self._run_all(lambda w: w.forward_step(x_data, step, train=False))
        collected = self._collect_forward(step)
        with no_grad():
            logits, _ = self._aggregate(collected["vectors"], train=False)
        return logits.data

    def train_step(self, xs: np.ndarray, ys: np.ndarray, lr: float) -> StepMetrics:
        """One optimizer step over a batch: per-sample micro-steps, then update.

        Gradients accumulate across the batch with a 1/B seed so the update
        uses the batch-mean gradient.
        """
        if len(xs) != len(ys) or len(xs) == 0:
            raise UsageError(f"batch of {len(xs)} inputs and {len(ys)} labels")
        start_bytes = self.channel.bytes_sent
        for w in self.workers:
            w.zero_grads()
        batch = len(xs)
        total_loss = 0.0
        correct = 0
        for x, y in zip(xs, ys):
            fwd = self.forward_training(x)
            loss = cross_entropy(fwd.logits, int(y))
            total_loss += loss.item()
            if int(np.argmax(fwd.logits.data)) == int(y):
                correct += 1
            self.backward_from_loss(fwd, loss, seed=1.0 / batch)
        self._run_all(lambda w: w.optimizer_step(lr))
        return StepMetrics(
            loss=total_loss / batch,
            accuracy=correct / batch,
            bytes_sent=self.channel.bytes_sent - start_bytes,
            samples=batch,
        )


def distributed_forward(executor: DistributedExecutor, x_data: np.ndarray) -> np.ndarray:
    return executor.forward(x_data)


def distributed_backward(executor: DistributedExecutor, fwd: TrainingForward,
                         logit_grad: np.ndarray) -> None:
    executor.backward(fwd, logit_grad)


def distributed_train_step(executor: DistributedExecutor, xs, ys, lr: float) -> StepMetrics:
    return executor.train_step(xs, ys, lr)
