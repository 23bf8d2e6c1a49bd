"""Synthetic state-tracking tasks: generators, oracles, and tokenization.

Four task families over the symbol set {0..m-1}:

* ``mod_add``     -- target is the sum of the inputs modulo m,
* ``mod_arith``   -- inputs interleaved with operators from {+, -, *},
                     applied left to right, all arithmetic modulo m,
* ``state_machine`` -- a fixed random automaton; the first input symbol is
                     the initial state, the rest drive transitions, and the
                     target is the final state,
* ``parity``      -- mod_add specialized to m == 2.

Every sample is framed ``[BOS] INPUT_1 ... INPUT_n [EOI]`` with the target
kept as a label (the model's prediction is read at the [EOI] position, so
the target token is never fed in).  Multi-digit integers are single tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import make_rng

MOD_ADD = "mod_add"
MOD_ARITH = "mod_arith"
STATE_MACHINE = "state_machine"
PARITY = "parity"
TASK_KINDS = (MOD_ADD, MOD_ARITH, STATE_MACHINE, PARITY)

BOS = "[BOS]"
EOI = "[EOI]"
OPERATORS = ("+", "-", "*")

_OP_FUNCS = (
    lambda a, b, m: (a + b) % m,
    lambda a, b, m: (a - b) % m,
    lambda a, b, m: (a * b) % m,
)


@dataclass(frozen=True)
class Fsm:
    """Deterministic automaton on states == alphabet == {0..m-1}.

    ``table[q][s]`` is the successor state delta(q, s); each row is a
    permutation of the alphabet (the transition function is a random
    permutation per state).
    """

    m: int
    table: tuple

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"Fsm: need at least 2 states, got {self.m}")
        if len(self.table) != self.m:
            raise ValueError(f"Fsm: table has {len(self.table)} rows, expected {self.m}")
        ref = list(range(self.m))
        for q, row in enumerate(self.table):
            if sorted(row) != ref:
                raise ValueError(f"Fsm: row {q} is not a permutation of 0..{self.m - 1}")

    def delta(self, q, s):
        return self.table[q][s]

    def run(self, inputs):
        """First input sets the state; the rest are transitions."""
        state = inputs[0]
        for s in inputs[1:]:
            state = self.table[state][s]
        return state

    def transition_matrix(self, s):
        """0/1 matrix D_s with D_s[i, j] = 1 iff delta(j, s) = i.

        Column j of D_s is the one-hot encoding of the successor of state j,
        so one-hot state vectors evolve as h' = D_s h.
        """
        D = np.zeros((self.m, self.m))
        for q in range(self.m):
            D[self.table[q][s], q] = 1.0
        return D

    def to_text(self):
        lines = [str(self.m)]
        lines += [" ".join(str(v) for v in row) for row in self.table]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        m = int(lines[0])
        table = tuple(tuple(int(v) for v in ln.split()) for ln in lines[1 : 1 + m])
        return cls(m, table)


def gen_fsm(m, rng):
    """Draw an automaton with one uniform random permutation per state row."""
    if m < 2:
        raise ValueError(f"gen_fsm: need m >= 2, got {m}")
    rng = make_rng(rng)
    table = tuple(tuple(int(v) for v in rng.permutation(m)) for _ in range(m))
    return Fsm(m, table)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    m: int
    max_len: int = 10
    fsm: Fsm | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.m < 2:
            raise ValueError(f"TaskSpec: m must be >= 2, got {self.m}")
        if self.kind == PARITY and self.m != 2:
            raise ValueError("parity requires m == 2")
        if (self.fsm is not None) != (self.kind == STATE_MACHINE):
            raise ValueError("fsm must be present iff kind == state_machine")
        if self.fsm is not None and self.fsm.m != self.m:
            raise ValueError("fsm size disagrees with m")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")


@dataclass(frozen=True)
class Sample:
    tokens: tuple
    target: int
    n_inputs: int


class Vocab:
    """Bijective token-string <-> id map for one task family.

    Ids 0..m-1 are the integer symbols (id == symbol value), operators
    follow for mod_arith, and [BOS]/[EOI] come last.
    """

    def __init__(self, kind, m):
        strings = [str(i) for i in range(m)]
        if kind == MOD_ARITH:
            strings += list(OPERATORS)
        strings += [BOS, EOI]
        self.kind = kind
        self.m = m
        self.strings = tuple(strings)
        self.ids = {s: i for i, s in enumerate(strings)}
        self.bos_id = self.ids[BOS]
        self.eoi_id = self.ids[EOI]
        self.op_base = m if kind == MOD_ARITH else None

    def __len__(self):
        return len(self.strings)

    def id_of(self, s):
        return self.ids[s]

    def str_of(self, i):
        return self.strings[i]


def vocab_for(spec):
    return Vocab(spec.kind, spec.m)


def oracle(spec, inputs, ops=None):
    """Ground-truth target for a symbol sequence (and operators, for mod_arith)."""
    if len(inputs) == 0:
        raise ValueError("oracle: empty input sequence")
    for s in inputs:
        if not 0 <= s < spec.m:
            raise ValueError(f"oracle: symbol {s} out of range [0, {spec.m})")
    if spec.kind in (MOD_ADD, PARITY):
        return int(sum(inputs) % spec.m)
    if spec.kind == MOD_ARITH:
        if ops is None or len(ops) != len(inputs) - 1:
            raise ValueError("oracle: mod_arith needs len(inputs)-1 operators")
        acc = inputs[0]
        for op, s in zip(ops, inputs[1:]):
            acc = _OP_FUNCS[op](acc, s, spec.m)
        return int(acc)
    return int(spec.fsm.run(inputs))


def _tokens_from(spec, vocab, inputs, ops):
    toks = [vocab.bos_id]
    if spec.kind == MOD_ARITH:
        toks.append(inputs[0])
        for op, s in zip(ops, inputs[1:]):
            toks.append(vocab.op_base + op)
            toks.append(s)
    else:
        toks.extend(inputs)
    toks.append(vocab.eoi_id)
    return tuple(int(t) for t in toks)


def gen_sample(spec, rng, n=None):
    """Draw one sample: n ~ U{2..max_len} inputs, symbols uniform with replacement."""
    rng = make_rng(rng)
    vocab = vocab_for(spec)
    if n is None:
        n = int(rng.integers(2, spec.max_len + 1))
    if n < 2:
        raise ValueError(f"gen_sample: need at least 2 inputs, got {n}")
    inputs = [int(s) for s in rng.integers(0, spec.m, size=n)]
    ops = None
    if spec.kind == MOD_ARITH:
        ops = [int(o) for o in rng.integers(0, len(OPERATORS), size=n - 1)]
    target = oracle(spec, inputs, ops)
    return Sample(_tokens_from(spec, vocab, inputs, ops), target, n)


def fixed_dataset(spec, size, rng):
    """A reusable dataset, deterministic given the seed.

    For the two-example parity set the draw is repeated until both classes
    are present (one odd, one even example).
    """
    if size < 1:
        raise ValueError("fixed_dataset: size must be >= 1")
    rng = make_rng(rng)
    while True:
        samples = [gen_sample(spec, rng) for _ in range(size)]
        if spec.kind == PARITY and size == 2:
            if {s.target for s in samples} != {0, 1}:
                continue
        return samples


# ---------------------------------------------------------------------------
# Batched generation (vectorized; used by the trainer and evaluator)
# ---------------------------------------------------------------------------


@dataclass
class TokenBatch:
    """Right-padded token matrix plus per-row bookkeeping.

    ``tokens`` is (B, T) int64, rows padded with the [EOI] id beyond
    ``n_tokens[b]``; padded positions are ignored by the models.
    """

    tokens: np.ndarray
    n_tokens: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def max_tokens(self):
        return self.tokens.shape[1]


def gen_token_batch(spec, rng, batch_size, n=None):
    """Vectorized equivalent of ``batch_size`` independent gen_sample draws.

    Marginals match gen_sample exactly (n uniform on {2..max_len}, symbols
    and operators uniform); only the order of RNG consumption differs.
    ``n`` pins every row to exactly n inputs (used for fixed-length eval).
    """
    rng = make_rng(rng)
    vocab = vocab_for(spec)
    m, N = spec.m, spec.max_len
    if n is None:
        n_arr = rng.integers(2, N + 1, size=batch_size)
    else:
        if n < 2:
            raise ValueError("gen_token_batch: n must be >= 2")
        N = n
        n_arr = np.full(batch_size, n, dtype=np.int64)
    syms = rng.integers(0, m, size=(batch_size, N))
    pos = np.arange(N)[None, :]
    active = pos < n_arr[:, None]

    if spec.kind in (MOD_ADD, PARITY):
        targets = (syms * active).sum(axis=1) % m
        n_tok = n_arr + 2
        tokens = np.full((batch_size, N + 2), vocab.eoi_id, dtype=np.int64)
        tokens[:, 0] = vocab.bos_id
        tokens[:, 1 : 1 + N] = np.where(active, syms, vocab.eoi_id)
    elif spec.kind == STATE_MACHINE:
        table = np.asarray(spec.fsm.table, dtype=np.int64)
        state = syms[:, 0].copy()
        for t in range(1, N):
            nxt = table[state, syms[:, t]]
            state = np.where(active[:, t], nxt, state)
        targets = state
        n_tok = n_arr + 2
        tokens = np.full((batch_size, N + 2), vocab.eoi_id, dtype=np.int64)
        tokens[:, 0] = vocab.bos_id
        tokens[:, 1 : 1 + N] = np.where(active, syms, vocab.eoi_id)
    else:  # mod_arith
        ops = rng.integers(0, len(OPERATORS), size=(batch_size, N - 1))
        acc = syms[:, 0].copy()
        for t in range(1, N):
            op = ops[:, t - 1]
            s = syms[:, t]
            stepped = np.select(
                [op == 0, op == 1, op == 2],
                [(acc + s) % m, (acc - s) % m, (acc * s) % m],
            )
            acc = np.where(active[:, t], stepped, acc)
        targets = acc
        n_tok = 2 * n_arr + 1
        tokens = np.full((batch_size, 2 * N + 1), vocab.eoi_id, dtype=np.int64)
        tokens[:, 0] = vocab.bos_id
        tokens[:, 1 : 2 * N : 2] = np.where(active, syms, vocab.eoi_id)
        tokens[:, 2 : 2 * N : 2] = np.where(
            active[:, 1:], vocab.op_base + ops, vocab.eoi_id
        )

    return TokenBatch(tokens, n_tok.astype(np.int64), targets.astype(np.int64))


def batch_from_samples(samples, vocab):
    """Pack per-sample token tuples into a padded TokenBatch."""
    n_tok = np.array([len(s.tokens) for s in samples], dtype=np.int64)
    T = int(n_tok.max())
    tokens = np.full((len(samples), T), vocab.eoi_id, dtype=np.int64)
    for i, s in enumerate(samples):
        tokens[i, : n_tok[i]] = s.tokens
    targets = np.array([s.target for s in samples], dtype=np.int64)
    return TokenBatch(tokens, n_tok, targets)


# ---------------------------------------------------------------------------
# Text dump format: one sample per line, exactly as framed, e.g.
#   [BOS] 8 0 12 18 5 [EOI] 3
# ---------------------------------------------------------------------------


def dump_samples(samples, vocab):
    lines = []
    for s in samples:
        lines.append(" ".join(vocab.str_of(t) for t in s.tokens) + " " + str(s.target))
    return "\n".join(lines) + "\n"


def parse_samples(text, vocab):
    samples = []
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] != BOS or parts[-2] != EOI:
            raise ValueError(f"malformed sample line: {line!r}")
        tokens = tuple(vocab.id_of(p) for p in parts[:-1])
        target = int(parts[-1])
        n_inputs = sum(1 for p in parts[1:-2] if p not in OPERATORS)
        samples.append(Sample(tokens, target, n_inputs))
    return samples
