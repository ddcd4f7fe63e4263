"""Sequence autoencoder over rule-id token sequences.

A single-layer GRU encoder compresses a token sequence into its final
hidden state; a GRU decoder reconstructs the sequence from that state.
Everything (forward, backward, Adam) is written directly on numpy
arrays: the mutation engine needs tight control over the decoder's
starting state, and a from-scratch cell keeps the whole gradient path
inspectable and checkable by finite differences.

Token layout: 0=<pad>, 1=<sos>, 2=<eos>; grammar rule ``r`` maps to
token ``r + 3``.

GRU cell (single matrix per side, gates stacked [update|reset|cand]):

    xW = x @ W + b          hU = h @ U
    u  = sigmoid(xW_u + hU_u)
    r  = sigmoid(xW_r + hU_r)
    c  = tanh(xW_c + r * hU_c)
    h' = (1 - u) * c + u * h

The decoder sees the embedding summary both as its initial state and —
when ``z_per_step`` is on — concatenated to every input embedding.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

PAD, SOS, EOS = 0, 1, 2
N_SPECIALS = 3

CHECKPOINT_VERSION = 1


@dataclass
class Hyperparams:
    batch_size: int = 32
    steps: int = 2000
    learning_rate: float = 0.001
    embedding_dim: int = 100
    hidden_dim: int = 256
    max_seq_len: int = 128
    rng_seed: int = 0
    z_per_step: bool = True
    shuffle: bool = True  # off = cyclic batches (reproducible corpora tests)
    dtype: str = "float32"

    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class Embedding:
    """Encoder summary vector (length = hidden_dim)."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding contains non-finite entries")


@dataclass
class Model:
    hp: Hyperparams
    vocab_size: int
    grammar_hash: str
    params: dict[str, np.ndarray]
    trained_steps: int = 0
    loss_history: list[float] = field(default_factory=list)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _init_params(hp: Hyperparams, vocab_size: int, rng: np.random.Generator):
    dt = hp.np_dtype()
    E, H = hp.embedding_dim, hp.hidden_dim
    dec_in = E + (H if hp.z_per_step else 0)

    def glorot(shape):
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape).astype(dt)

    return {
        "enc_emb": (rng.normal(0.0, 0.1, size=(vocab_size, E))).astype(dt),
        "enc_W": glorot((E, 3 * H)),
        "enc_U": glorot((H, 3 * H)),
        "enc_b": np.zeros(3 * H, dtype=dt),
        "dec_emb": (rng.normal(0.0, 0.1, size=(vocab_size, E))).astype(dt),
        "dec_W": glorot((dec_in, 3 * H)),
        "dec_U": glorot((H, 3 * H)),
        "dec_b": np.zeros(3 * H, dtype=dt),
        "out_W": glorot((H, vocab_size)),
        "out_b": np.zeros(vocab_size, dtype=dt),
    }


def _gru_step(x, h, W, U, b, hidden_dim):
    """One forward step; returns new h and the cache for backward."""
    xW = x @ W + b
    hU = h @ U
    H = hidden_dim
    u = _sigmoid(xW[:, :H] + hU[:, :H])
    r = _sigmoid(xW[:, H : 2 * H] + hU[:, H : 2 * H])
    c = np.tanh(xW[:, 2 * H :] + r * hU[:, 2 * H :])
    h_new = (1.0 - u) * c + u * h
    return h_new, (x, h, hU, u, r, c)


def _gru_backstep(dh_new, cache, W, U, hidden_dim):
    """Backward through one step.  Returns (dx, dh_prev, dW, dU, db)."""
    x, h_prev, hU, u, r, c = cache
    H = hidden_dim
    du = dh_new * (h_prev - c)
    dc = dh_new * (1.0 - u)
    dh_prev = dh_new * u
    dc_pre = dc * (1.0 - c * c)
    dr = dc_pre * hU[:, 2 * H :]
    dhU_c = dc_pre * r
    du_pre = du * u * (1.0 - u)
    dr_pre = dr * r * (1.0 - r)
    dxW = np.concatenate([du_pre, dr_pre, dc_pre], axis=1)
    dhU = np.concatenate([du_pre, dr_pre, dhU_c], axis=1)
    dW = x.T @ dxW
    db = dxW.sum(axis=0)
    dx = dxW @ W.T
    dU = h_prev.T @ dhU
    dh_prev = dh_prev + dhU @ U.T
    return dx, dh_prev, dW, dU, db


def _prepare_batch(token_lists, max_seq_len, dtype):
    """Build encoder/decoder id arrays for one batch.

    encoder input:   tokens + <eos>, padded
    decoder input:   <sos> + tokens, padded
    decoder target:  tokens + <eos>, padded (weight 0 on pads)
    """
    B = len(token_lists)
    T = max(len(t) for t in token_lists) + 1
    if T > max_seq_len + 1:
        raise ValueError("sequence longer than max_seq_len")
    enc_ids = np.zeros((B, T), dtype=np.int64)
    dec_ids = np.zeros((B, T), dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    weights = np.zeros((B, T), dtype=dtype)
    enc_mask = np.zeros((B, T), dtype=dtype)
    for i, toks in enumerate(token_lists):
        shifted = [t + N_SPECIALS for t in toks]
        n = len(shifted)
        enc_ids[i, :n] = shifted
        enc_ids[i, n] = EOS
        enc_mask[i, : n + 1] = 1.0
        dec_ids[i, 0] = SOS
        dec_ids[i, 1 : n + 1] = shifted
        targets[i, :n] = shifted
        targets[i, n] = EOS
        weights[i, : n + 1] = 1.0
    return enc_ids, enc_mask, dec_ids, targets, weights


def _forward_backward(params, hp: Hyperparams, batch, compute_grads=True):
    """Weighted cross-entropy loss over a batch; optionally gradients."""
    enc_ids, enc_mask, dec_ids, targets, weights = batch
    H = hp.hidden_dim
    dt = hp.np_dtype()
    B, T = enc_ids.shape

    # encoder
    h = np.zeros((B, H), dtype=dt)
    enc_caches = []
    for t in range(T):
        x = params["enc_emb"][enc_ids[:, t]]
        h_new, cache = _gru_step(
            x, h, params["enc_W"], params["enc_U"], params["enc_b"], H
        )
        m = enc_mask[:, t : t + 1]
        h_next = m * h_new + (1.0 - m) * h
        enc_caches.append((cache, m, h))
        h = h_next
    z = h

    # decoder (teacher forcing)
    h = z
    dec_caches = []
    logits_all = []
    for t in range(T):
        emb = params["dec_emb"][dec_ids[:, t]]
        x = np.concatenate([emb, z], axis=1) if hp.z_per_step else emb
        h, cache = _gru_step(
            x, h, params["dec_W"], params["dec_U"], params["dec_b"], H
        )
        dec_caches.append((cache, h))
        logits_all.append(h @ params["out_W"] + params["out_b"])

    # weighted cross-entropy (stable log-softmax)
    total_w = float(weights.sum())
    loss = 0.0
    dlogits_all = [] if compute_grads else None
    n_correct = 0
    n_counted = 0
    for t in range(T):
        logits = logits_all[t]
        m = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - m)
        sumex = ex.sum(axis=1, keepdims=True)
        logp = (logits - m) - np.log(sumex)
        w = weights[:, t]
        tgt = targets[:, t]
        loss -= float((logp[np.arange(B), tgt] * w).sum())
        pred = logits.argmax(axis=1)
        n_correct += int(((pred == tgt) * (w > 0)).sum())
        n_counted += int((w > 0).sum())
        if compute_grads:
            dl = ex / sumex
            dl[np.arange(B), tgt] -= 1.0
            dl *= (w / total_w)[:, None]
            dlogits_all.append(dl)
    loss /= total_w
    acc = n_correct / max(n_counted, 1)
    if not compute_grads:
        return loss, acc, None

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dz = np.zeros((B, H), dtype=dt)
    dh = np.zeros((B, H), dtype=dt)
    for t in range(T - 1, -1, -1):
        cache, h_t = dec_caches[t]
        dlog = dlogits_all[t]
        grads["out_W"] += h_t.T @ dlog
        grads["out_b"] += dlog.sum(axis=0)
        dh = dh + dlog @ params["out_W"].T
        dx, dh, dW, dU, db = _gru_backstep(
            dh, cache, params["dec_W"], params["dec_U"], H
        )
        grads["dec_W"] += dW
        grads["dec_U"] += dU
        grads["dec_b"] += db
        E = hp.embedding_dim
        demb = dx[:, :E]
        if hp.z_per_step:
            dz += dx[:, E:]
        np.add.at(grads["dec_emb"], dec_ids[:, t], demb)
    dz += dh  # decoder initial state was z

    dh = dz
    for t in range(T - 1, -1, -1):
        cache, m, h_prev = enc_caches[t]
        dh_new = dh * m
        dh_skip = dh * (1.0 - m)
        dx, dh, dW, dU, db = _gru_backstep(
            dh_new, cache, params["enc_W"], params["enc_U"], H
        )
        grads["enc_W"] += dW
        grads["enc_U"] += dU
        grads["enc_b"] += db
        dh = dh + dh_skip
        np.add.at(grads["enc_emb"], enc_ids[:, t], dx)
    return loss, acc, grads


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def _corpus_tokens(corpus):
    out = []
    for rs in corpus:
        toks = rs.tokens if hasattr(rs, "tokens") else list(rs)
        out.append(list(toks))
    return out


def train(corpus, hp: Hyperparams, grammar_hash: str | None = None, log=None) -> Model:
    """Train on rule sequences (reconstruction objective)."""
    if not corpus:
        raise ValueError("empty training corpus")
    token_lists = _corpus_tokens(corpus)
    hashes = {rs.grammar_hash for rs in corpus if hasattr(rs, "grammar_hash")}
    if grammar_hash is None:
        if len(hashes) > 1:
            raise ValueError("corpus mixes sequences from different grammars")
        grammar_hash = hashes.pop() if hashes else ""
    longest = max(len(t) for t in token_lists)
    if longest > hp.max_seq_len:
        raise ValueError(
            "longest sequence (%d) exceeds max_seq_len (%d)" % (longest, hp.max_seq_len)
        )
    vocab = max(max(t) for t in token_lists if t) + 1 + N_SPECIALS
    rng = np.random.default_rng(hp.rng_seed)
    params = _init_params(hp, vocab, rng)
    opt = _Adam(params, hp.learning_rate)
    model = Model(hp=hp, vocab_size=vocab, grammar_hash=grammar_hash, params=params)

    n = len(token_lists)
    t_start = time.time()
    for step in range(hp.steps):
        if hp.shuffle:
            idx = rng.integers(0, n, size=hp.batch_size)
        else:
            base = step * hp.batch_size
            idx = [(base + j) % n for j in range(hp.batch_size)]
        batch_tokens = [token_lists[i] for i in idx]
        batch = _prepare_batch(batch_tokens, hp.max_seq_len, hp.np_dtype())
        loss, acc, grads = _forward_backward(params, hp, batch)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss at step %d" % step)
        opt.step(params, grads)
        model.loss_history.append(loss)
        if log and (step % 100 == 0 or step == hp.steps - 1):
            log(
                "step %5d/%d  loss %.4f  batch-acc %.3f  (%.1fs)"
                % (step, hp.steps, loss, acc, time.time() - t_start)
            )
    model.trained_steps = hp.steps
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite parameter %r after training" % k)
    return model


def _check_hash(m: Model, x) -> None:
    xh = getattr(x, "grammar_hash", None)
    if xh is not None and m.grammar_hash and xh != m.grammar_hash:
        raise ValueError(
            "sequence grammar hash %s does not match model hash %s"
            % (xh[:12], m.grammar_hash[:12])
        )


def encode(m: Model, x) -> Embedding:
    """Summarise a rule sequence as the encoder's final hidden state."""
    _check_hash(m, x)
    toks = x.tokens if hasattr(x, "tokens") else list(x)
    if any(t + N_SPECIALS >= m.vocab_size or t < 0 for t in toks):
        raise ValueError("token out of vocabulary")
    hp = m.hp
    ids = np.asarray([t + N_SPECIALS for t in toks] + [EOS], dtype=np.int64)
    h = np.zeros((1, hp.hidden_dim), dtype=hp.np_dtype())
    for t in range(ids.shape[0]):
        x_t = m.params["enc_emb"][ids[t : t + 1]]
        h, _ = _gru_step(
            x_t, h, m.params["enc_W"], m.params["enc_U"], m.params["enc_b"], hp.hidden_dim
        )
    return Embedding(vector=h[0].copy())


def decode(m: Model, z) -> list[int]:
    """Greedy decode from an embedding into grammar rule ids."""
    vec = z.vector if isinstance(z, Embedding) else np.asarray(z)
    hp = m.hp
    h = vec.reshape(1, hp.hidden_dim).astype(hp.np_dtype())
    z_row = h.copy()
    prev = SOS
    out: list[int] = []
    for _ in range(hp.max_seq_len):
        emb = m.params["dec_emb"][np.asarray([prev])]
        x = np.concatenate([emb, z_row], axis=1) if hp.z_per_step else emb
        h, _ = _gru_step(
            x, h, m.params["dec_W"], m.params["dec_U"], m.params["dec_b"], hp.hidden_dim
        )
        logits = h @ m.params["out_W"] + m.params["out_b"]
        prev = int(logits[0].argmax())
        if prev == EOS:
            break
        # specials other than <eos> map below 0: clearly not rule ids
        out.append(prev - N_SPECIALS)
    return out


def reconstruction_accuracy(m: Model, sequences) -> float:
    """Greedy-decode token accuracy against the inputs themselves."""
    n_total = 0
    n_match = 0
    for rs in sequences:
        toks = rs.tokens if hasattr(rs, "tokens") else list(rs)
        got = decode(m, encode(m, rs))
        n_total += max(len(toks), len(got))
        n_match += sum(1 for a, b in zip(toks, got) if a == b)
    return n_match / max(n_total, 1)


def save_model(m: Model, path: str) -> None:
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "hp": asdict(m.hp),
            "vocab_size": m.vocab_size,
            "grammar_hash": m.grammar_hash,
            "trained_steps": m.trained_steps,
        }
    )
    arrays = dict(m.params)
    arrays["loss_history"] = np.asarray(m.loss_history, dtype=np.float64)
    arrays["header"] = np.frombuffer(header.encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_model(path: str) -> Model:
    data = np.load(path if str(path).endswith(".npz") else str(path) + ".npz")
    header = json.loads(bytes(data["header"]).decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version %r" % header.get("version"))
    hp = Hyperparams(**header["hp"])
    params = {
        k: data[k] for k in data.files if k not in ("header", "loss_history")
    }
    return Model(
        hp=hp,
        vocab_size=header["vocab_size"],
        grammar_hash=header["grammar_hash"],
        params=params,
        trained_steps=header["trained_steps"],
        loss_history=list(data["loss_history"]),
    )


def numeric_gradient_check(
    m: Model, x, n_samples: int = 60, h: float = 1e-4, rng_seed: int = 0
) -> float:
    """Max relative error between analytic and central-difference
    gradients over sampled parameter coordinates."""
    toks = x.tokens if hasattr(x, "tokens") else list(x)
    batch = _prepare_batch([list(toks)], m.hp.max_seq_len, m.hp.np_dtype())
    _, _, grads = _forward_backward(m.params, m.hp, batch)

    def loss_only():
        loss, _, _ = _forward_backward(m.params, m.hp, batch, compute_grads=False)
        return loss

    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    names = sorted(m.params)
    for _ in range(n_samples):
        name = names[int(rng.integers(0, len(names)))]
        p = m.params[name]
        flat_idx = int(rng.integers(0, p.size))
        idx = np.unravel_index(flat_idx, p.shape)
        orig = p[idx]
        p[idx] = orig + h
        lp = loss_only()
        p[idx] = orig - h
        lm = loss_only()
        p[idx] = orig
        numeric = (lp - lm) / (2.0 * h)
        analytic = float(grads[name][idx])
        rel = abs(analytic - numeric) / (abs(analytic) + 1e-8)
        worst = max(worst, rel)
    return worst
