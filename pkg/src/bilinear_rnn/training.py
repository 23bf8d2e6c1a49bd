"""Backpropagation-through-time training: loss, Adam, train loop, evaluation.

The backward pass is exact reverse-mode differentiation of each variant's
recurrence (see models.Model.backward_batch); this module owns the loss,
the optimizer, the batching protocol, and an independent finite-difference
verifier for every parameter group.

Training protocol: at every step a fresh batch is sampled (lengths uniform
on {2..max_len}), the loss is the mean softmax cross-entropy of the [EOI]
prediction, gradients are clipped by global norm, and Adam updates all
non-frozen parameter groups.  Training runs the raw linear recurrence (no
hidden-state normalization); early stopping fires when the loss on a fixed
held-out validation set drops below the threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .linalg import make_rng, split_rng
from .models import ELMAN, Model, OverflowAbort
from . import tasks
from .tasks import TokenBatch, gen_token_batch


def softmax_cross_entropy(logits, targets):
    """Mean stabilized cross-entropy and its gradient w.r.t. the logits.

    ``logits`` is (B, C); the returned gradient is (softmax - one_hot)/B,
    i.e. the gradient of the *mean* loss.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    B = logits.shape[0]
    loss = -logp[np.arange(B), targets].mean()
    dlogits = ez / sez
    dlogits[np.arange(B), targets] -= 1.0
    return loss, dlogits / B


def loss(logits, target):
    """Cross-entropy of a single prediction."""
    val, _ = softmax_cross_entropy(np.asarray(logits, dtype=float)[None, :], np.array([target]))
    return float(val)


def backward(model, trace, dlogits):
    """Structure-matched parameter gradients for a cached forward pass."""
    return model.backward_batch(trace, dlogits)


def global_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads, max_norm):
    """In-place rescale so the concatenated gradient norm is <= max_norm."""
    n = global_norm(grads)
    if np.isfinite(n) and n > max_norm > 0:
        scale = max_norm / n
        for g in grads.values():
            g *= scale
    return n


@dataclass
class AdamState:
    """Bias-corrected Adam moments, one pair of tensors per parameter group."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr):
        st = cls(lr=lr)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adam_step(params, grads, state, frozen=()):
    """Standard Adam update, applied in place; frozen groups are skipped."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        if k in frozen:
            continue
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    learning_rates: tuple = (1e-3, 1e-4, 1e-5)
    steps: int = 100_000
    batch_size: int = 64
    early_stop_loss: float = 1e-5
    min_len: int = 2
    max_len: int = 10
    seed: int = 0
    clip_norm: float = 1.0
    val_size: int = 512
    val_every: int = 200
    frozen: tuple = ()
    fixed_dataset_size: int | None = None
    fixed_dataset_epochs: int | None = None


class TrainingOverflow(RuntimeError):
    """A training forward pass produced non-finite states; run is void."""

    def __init__(self, step):
        super().__init__(f"hidden state overflow at step {step}")
        self.step = step


def batch_loss(model, batch, want_grads=False):
    """Loss (and optionally gradients) of a TokenBatch under the raw recurrence."""
    logits, invalid, trace = model.forward_batch(
        batch.tokens, batch.n_tokens, normalize=False, want_trace=want_grads
    )
    if invalid.any() or not np.all(np.isfinite(logits)):
        raise OverflowAbort("non-finite logits in batch")
    val, dlogits = softmax_cross_entropy(logits, batch.targets)
    if not np.isfinite(val):
        raise OverflowAbort("non-finite loss")
    if not want_grads:
        acc = float((np.argmax(logits, axis=1) == batch.targets).mean())
        return float(val), acc, None
    grads = model.backward_batch(trace, dlogits)
    acc = float((np.argmax(logits, axis=1) == batch.targets).mean())
    return float(val), acc, grads


@dataclass
class History:
    """Validation-loss trajectory of one training run."""

    rows: list = field(default_factory=list)  # (step, train_loss, val_loss, val_acc)
    stopped_early: bool = False
    steps_run: int = 0
    wall_s: float = 0.0

    def to_csv(self):
        lines = ["step,train_loss,val_loss,val_acc"]
        lines += [f"{s},{tl:.10g},{vl:.10g},{va:.10g}" for s, tl, vl, va in self.rows]
        return "\n".join(lines) + "\n"

    @property
    def final_val_loss(self):
        return self.rows[-1][2] if self.rows else float("inf")

    @property
    def final_val_acc(self):
        return self.rows[-1][3] if self.rows else 0.0


def train(model, spec, cfg, lr=None):
    """Optimize ``model`` on task ``spec``; returns (model, History).

    Fresh batches are drawn every step unless ``cfg.fixed_dataset_size`` is
    set, in which case a fixed dataset is generated once and iterated in
    shuffled batches for ``fixed_dataset_epochs`` passes.  Raises
    TrainingOverflow if the recurrence explodes (caller records the run as
    failed).  Deterministic given (model init, cfg.seed).
    """
    lr = cfg.learning_rates[0] if lr is None else lr
    data_rng, val_rng, shuffle_rng = split_rng(make_rng(cfg.seed), 3)
    val_batch = gen_token_batch(spec, val_rng, cfg.val_size)
    state = AdamState.for_params(model.params, lr)
    history = History()
    t0 = time.perf_counter()

    fixed = None
    if cfg.fixed_dataset_size:
        samples = tasks.fixed_dataset(spec, cfg.fixed_dataset_size, data_rng)
        fixed = tasks.batch_from_samples(samples, tasks.vocab_for(spec))
        epochs = cfg.fixed_dataset_epochs or 1000
        order = np.arange(len(samples))
        n_steps = epochs * max(1, len(samples) // cfg.batch_size)
    else:
        n_steps = cfg.steps

    cursor = 0
    for step in range(1, n_steps + 1):
        try:
            if fixed is None:
                batch = gen_token_batch(spec, data_rng, cfg.batch_size)
            else:
                if cursor + cfg.batch_size > len(order):
                    shuffle_rng.shuffle(order)
                    cursor = 0
                idx = order[cursor : cursor + cfg.batch_size]
                cursor += cfg.batch_size
                batch = TokenBatch(fixed.tokens[idx], fixed.n_tokens[idx], fixed.targets[idx])
            train_loss, _, grads = batch_loss(model, batch, want_grads=True)
            clip_by_global_norm(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, frozen=cfg.frozen)
        except OverflowAbort as e:
            raise TrainingOverflow(step) from e

        if step % cfg.val_every == 0 or step == n_steps:
            try:
                val_loss, val_acc, _ = batch_loss(model, val_batch)
            except OverflowAbort as e:
                raise TrainingOverflow(step) from e
            history.rows.append((step, train_loss, val_loss, val_acc))
            if val_loss < cfg.early_stop_loss:
                history.stopped_early = True
                history.steps_run = step
                break
    history.steps_run = history.steps_run or n_steps
    history.wall_s = time.perf_counter() - t0
    return model, history


@dataclass
class EvalResult:
    raw_acc: float
    norm_acc: float
    n_samples: int
    n_invalid: int


def normalized_accuracy(raw, m):
    """Affine rescale pinning chance (1/m) to 0 and perfect accuracy to 1."""
    return (raw - 1.0 / m) / (1.0 - 1.0 / m)


def evaluate(model, spec, length, n_samples, seed, normalize="auto"):
    """Accuracy on fresh samples with exactly ``length`` inputs.

    ``normalize="auto"`` turns on per-step hidden-state normalization for
    scale-invariant (pure multiplicative) models and leaves the raw
    recurrence for everything else; rows that overflow score as wrong.
    """
    if length < 2:
        raise ValueError("evaluate: length must be >= 2")
    if normalize == "auto":
        normalize = model.is_pure_multiplicative
    batch = gen_token_batch(spec, make_rng(seed), n_samples, n=length)
    pred = model.predict_batch(batch, normalize=normalize)
    raw = float((pred == batch.targets).mean())
    return EvalResult(raw, normalized_accuracy(raw, spec.m), n_samples, int((pred == -1).sum()))


def evaluate_band(model, spec, n_samples, seed, normalize="auto"):
    """Accuracy on the in-distribution band (lengths 2..max_len mixed)."""
    if normalize == "auto":
        normalize = model.is_pure_multiplicative
    batch = gen_token_batch(spec, make_rng(seed), n_samples)
    pred = model.predict_batch(batch, normalize=normalize)
    raw = float((pred == batch.targets).mean())
    return EvalResult(raw, normalized_accuracy(raw, spec.m), n_samples, int((pred == -1).sum()))


# ---------------------------------------------------------------------------
# Independent gradient verification (central finite differences)
# ---------------------------------------------------------------------------


def finite_difference_check(model, batch, eps=1e-5):
    """Max relative error of analytic BPTT against central differences.

    Every entry of every parameter group is perturbed by +-eps and the loss
    re-evaluated; the analytic gradient must match (L+ - L-)/(2 eps).  The
    per-group error is ||g_bptt - g_fd||_inf normalized by the larger of the
    two gradient magnitudes (floored at 1 to keep near-zero groups from
    inflating the ratio).  Returns {group: relative_error}.
    """
    _, _, grads = batch_loss(model, batch, want_grads=True)

    def loss_only():
        val, _, _ = batch_loss(model, batch)
        return val

    report = {}
    for name, p in model.params.items():
        fd = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_fd = fd.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            lp = loss_only()
            flat_p[i] = orig - eps
            lm = loss_only()
            flat_p[i] = orig
            flat_fd[i] = (lp - lm) / (2.0 * eps)
        scale = max(1.0, float(np.abs(grads[name]).max()), float(np.abs(fd).max()))
        report[name] = float(np.abs(grads[name] - fd).max()) / scale
    return report


def gradcheck_all_variants(H=4, D=3, seeds=range(20), max_len=5, eps=1e-5):
    """Finite-difference sweep over all six variants; returns worst-case table.

    Uses moderate random inits (half-width 0.5) so gradients are well away
    from the denormal floor, additive terms enabled to cover B and b.
    """
    from .models import VARIANTS, AdditiveConfig

    spec = tasks.TaskSpec(tasks.MOD_ADD, m=3, max_len=max_len)
    vocab = tasks.vocab_for(spec)
    worst = {}
    for kind in VARIANTS:
        block_size = 2 if kind == "block_diag" else None
        for seed in seeds:
            rng = make_rng(10_000 + seed)
            model = Model.build(
                kind,
                H,
                D,
                len(vocab),
                spec.m,
                rng,
                rank=3 if kind == "factored" else None,
                block_size=block_size,
                additive=AdditiveConfig(True, True, init_half_width=0.3),
                init_half_width=0.5,
            )
            batch = gen_token_batch(spec, make_rng(20_000 + seed), 3)
            report = finite_difference_check(model, batch, eps=eps)
            for group, err in report.items():
                key = (kind, group)
                worst[key] = max(worst.get(key, 0.0), err)
    return worst
