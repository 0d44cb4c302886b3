"""Trainable span classifier.

Pipeline per characteristic: all n-gram suggestions -> hashed attribute
embeddings -> maxout window encoder -> mean/max pooling -> maxout hidden
layer -> softmax.  Class 0 is the negative ("no label") class.
Forward and backward passes are hand-written numpy so that gradients can
be checked in float64 while training runs in float32.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import modelio
from .corpus import SpanAnnotation
from .errors import TrainingError, ValidationError
from .evaluation import span_f1
from .kernels import (maxout_select, maxout_select_backward, span_max_pool,
                      span_max_pool_backward)
from .nn import Adam, scatter_rows
from .ontology import Ontology, SeverityLabel
from .textproc import TokenizedDocument, hash_rows, tokenize

log = logging.getLogger(__name__)

LN_EPS = 1e-5
SWEEP_WEIGHTS = (0.6, 0.8, 1.0)


@dataclass(frozen=True)
class SuggesterConfig:
    min_len: int = 1
    max_len: int = 25

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ValidationError("suggester needs 1 <= min_len <= max_len")


def suggest_spans(doc, cfg: SuggesterConfig = SuggesterConfig()) -> np.ndarray:
    """All token ranges ``[start, end)`` with length in range, ordered by (start, length).

    ``doc`` may be a TokenizedDocument or a token count.
    """
    L = doc if isinstance(doc, (int, np.integer)) else len(doc)
    lengths = np.arange(cfg.min_len, cfg.max_len + 1)
    starts = np.repeat(np.arange(L), lengths.size)
    ends = starts + np.tile(lengths, L)
    keep = ends <= L
    return np.stack([starts[keep], ends[keep]], axis=1)


def suggestion_count(L: int, cfg: SuggesterConfig = SuggesterConfig()) -> int:
    return sum(L - k + 1 for k in range(cfg.min_len, min(cfg.max_len, L) + 1))


@dataclass
class SpanModelConfig:
    embed_rows: tuple = (5000, 1000, 2500, 2500)
    width: int = 96
    depth: int = 4
    window: int = 1
    maxout_pieces: int = 3
    hidden: int = 96
    dropout: float = 0.1
    lr: float = 0.001
    max_steps: int = 20000
    patience: int = 1600
    eval_frequency: int = 200
    negative_weight: float = 1.0
    batch_size: int = 8
    dev_fraction: float = 0.1
    min_len: int = 1
    max_len: int = 25
    seed: int = 0
    prior_bias: bool = True

    def __post_init__(self):
        self.embed_rows = tuple(int(r) for r in self.embed_rows)
        if len(self.embed_rows) != 4 or min(self.embed_rows) <= 0:
            raise ValidationError("embed_rows needs four positive row counts")
        for name in ("width", "depth", "maxout_pieces", "hidden", "max_steps", "patience",
                     "eval_frequency", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.width % 4:
            raise ValidationError("width must be divisible by the four attribute tables")
        if self.window < 0 or not 0.0 <= self.dropout < 1.0 or self.lr <= 0:
            raise ValidationError("invalid window, dropout or learning rate")
        if not 0.0 < self.negative_weight <= 1.0:
            raise ValidationError("negative_weight must lie in (0, 1]")
        SuggesterConfig(self.min_len, self.max_len)

    @classmethod
    def desk(cls, **overrides) -> "SpanModelConfig":
        """Short schedule for single-CPU runs: small batches, fewer steps."""
        base = {"batch_size": 2, "max_steps": 4000, "patience": 600, "eval_frequency": 250}
        return cls(**{**base, **overrides})

    @property
    def suggester(self) -> SuggesterConfig:
        return SuggesterConfig(self.min_len, self.max_len)

    def to_json(self) -> dict:
        d = asdict(self)
        d["embed_rows"] = list(self.embed_rows)
        return d

    @classmethod
    def from_json(cls, obj) -> "SpanModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


# ---------------------------------------------------------------- layers

def init_params(cfg: SpanModelConfig, n_classes: int, seed=None, dtype=np.float32) -> dict:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    w, p, h = cfg.width, cfg.maxout_pieces, cfg.hidden
    sub = w // 4

    def glorot(n_out, n_in):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, (n_out, n_in))

    P = {}
    for k, rows in enumerate(cfg.embed_rows):
        P[f"embed{k}"] = rng.uniform(-0.1, 0.1, (rows, sub))
    P["mix_W"], P["mix_b"] = glorot(w * p, w), np.zeros(w * p)
    P["mix_g"], P["mix_beta"] = np.ones(w), np.zeros(w)
    win = 2 * cfg.window + 1
    for layer in range(cfg.depth):
        P[f"enc{layer}_W"] = glorot(w * p, w * win)
        P[f"enc{layer}_b"] = np.zeros(w * p)
        P[f"enc{layer}_g"] = np.ones(w)
        P[f"enc{layer}_beta"] = np.zeros(w)
    P["hid_W"], P["hid_b"] = glorot(h * p, 2 * w), np.zeros(h * p)
    P["hid_g"], P["hid_beta"] = np.ones(h), np.zeros(h)
    P["out_W"] = np.zeros((n_classes, h))
    P["out_b"] = np.zeros(n_classes)
    return {k: v.astype(dtype) for k, v in P.items()}


def _maxout(x, W, b, pieces):
    """Linear map to ``pieces`` blocks of units (pieces-major rows), max over blocks."""
    return maxout_select(x @ W.T + b, pieces)


def _maxout_back(dy, x, W, idx, pieces):
    dz = maxout_select_backward(dy, idx, pieces)
    return dz @ W, dz.T @ x, dz.sum(axis=0)


def _layernorm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _dropout_mask(rng, shape, rate, dtype):
    if rate <= 0 or rng is None:
        return None
    keep = rng.random(shape, dtype=np.float32) >= rate
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - rate), dtype=dtype)


def _range_sum(X, starts, ends):
    """Sum of rows per span, accumulated row by row from the span start."""
    lengths = ends - starts
    out = np.empty((starts.shape[0], X.shape[1]), dtype=X.dtype)
    if not starts.size:
        return out
    R = X.copy()
    N = X.shape[0]
    for k in range(1, int(lengths.max()) + 1):
        if k > 1:
            R[:N - k + 1] += X[k - 1:]
        sel = np.nonzero(lengths == k)[0]
        if sel.size:
            out[sel] = R[starts[sel]]
    return out


@dataclass
class Batch:
    """Several documents laid out for one forward pass.

    Token rows are concatenated; ``pos`` maps them into a zero-padded
    buffer with ``window`` blank rows between documents so that window
    features never see a neighbouring document.
    """

    rows: np.ndarray          # (M, 4) hashed attribute rows
    pos: np.ndarray           # (M,) positions in the padded buffer
    n_padded: int
    starts: np.ndarray        # (S,) span starts in token-row space
    ends: np.ndarray
    labels: np.ndarray | None = None  # (S,) class indices
    doc_index: np.ndarray | None = None  # (S,) owning document
    offsets: np.ndarray | None = None    # (n_docs,) first token row per document


def make_batch(items, window: int) -> Batch:
    """``items``: sequence of (rows, spans, labels-or-None) per document."""
    rows, pos, st, en, labs, didx, offs = [], [], [], [], [], [], []
    m = 0
    p = window
    for d, (r, spans, lab) in enumerate(items):
        L = r.shape[0]
        rows.append(r)
        pos.append(np.arange(p, p + L))
        offs.append(m)
        st.append(spans[:, 0] + m)
        en.append(spans[:, 1] + m)
        didx.append(np.full(spans.shape[0], d))
        if lab is not None:
            labs.append(lab)
        m += L
        p += L + window
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    return Batch(
        rows=np.concatenate(rows) if rows else np.zeros((0, 4), np.int64),
        pos=cat(pos, np.int64), n_padded=p,
        starts=cat(st, np.int64), ends=cat(en, np.int64),
        labels=cat(labs, np.int64) if labs else None,
        doc_index=cat(didx, np.int64), offsets=np.asarray(offs, dtype=np.int64))


def embed_rows(P, rows, cfg: SpanModelConfig, rng=None, cache=None):
    """Hashed-attribute embedding lookup, maxout mix and layer norm (M x width)."""
    E = np.concatenate([P[f"embed{k}"][rows[:, k]] for k in range(4)], axis=1)
    mask = _dropout_mask(rng, E.shape, cfg.dropout, E.dtype)
    Ed = E * mask if mask is not None else E
    h, idx = _maxout(Ed, P["mix_W"], P["mix_b"], cfg.maxout_pieces)
    y, ln = _layernorm(h, P["mix_g"], P["mix_beta"])
    if cache is not None:
        cache["embed"] = (rows, mask, Ed, idx, ln)
    return y


def encode(P, X, pos, n_padded, cfg: SpanModelConfig, cache=None):
    """Residual stack of maxout window layers; output shape equals input shape."""
    if X.shape[1] != cfg.width:
        raise ValidationError(f"encoder expects width {cfg.width}, got {X.shape[1]}")
    w = cfg.window
    offsets = range(-w, w + 1)
    layers = []
    for layer in range(cfg.depth):
        buf = np.zeros((n_padded, X.shape[1]), dtype=X.dtype)
        buf[pos] = X
        Z = np.concatenate([buf[pos + o] for o in offsets], axis=1)
        h, idx = _maxout(Z, P[f"enc{layer}_W"], P[f"enc{layer}_b"], cfg.maxout_pieces)
        y, ln = _layernorm(h, P[f"enc{layer}_g"], P[f"enc{layer}_beta"])
        layers.append((Z, idx, ln))
        X = X + y
    if cache is not None:
        cache["encode"] = layers
    return X


def pool_and_classify(P, H, starts, ends, cfg: SpanModelConfig, rng=None, cache=None):
    """Mean||max pooling over each range, hidden maxout layer, softmax."""
    if starts.size and (ends <= starts).any():
        raise ValidationError("empty span range")
    lengths = (ends - starts).astype(H.dtype)[:, None]
    mean = _range_sum(H, starts, ends) / lengths
    mx, arg = span_max_pool(H, starts, ends)
    pooled = np.concatenate([mean, mx], axis=1)
    mask = _dropout_mask(rng, pooled.shape, cfg.dropout, pooled.dtype)
    pooled_d = pooled * mask if mask is not None else pooled
    h, idx = _maxout(pooled_d, P["hid_W"], P["hid_b"], cfg.maxout_pieces)
    y, ln = _layernorm(h, P["hid_g"], P["hid_beta"])
    logits = y @ P["out_W"].T + P["out_b"]
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    if cache is not None:
        cache["head"] = (starts, ends, lengths, arg, mask, pooled_d, idx, ln, y)
    return probs


def forward(P, batch: Batch, cfg: SpanModelConfig, rng=None, cache=None):
    X = embed_rows(P, batch.rows, cfg, rng, cache)
    H = encode(P, X, batch.pos, batch.n_padded, cfg, cache)
    return pool_and_classify(P, H, batch.starts, batch.ends, cfg, rng, cache)


def span_loss(probs, labels, negative_weight: float) -> float:
    """Cross-entropy with negative-class terms scaled, averaged over spans."""
    w = np.where(labels == 0, negative_weight, 1.0)
    p = probs[np.arange(labels.size), labels]
    return float(-(w * np.log(p)).sum() / labels.size)


def loss_and_grads(P, batch: Batch, cfg: SpanModelConfig, negative_weight: float, rng=None):
    """Weighted loss and gradients for every parameter."""
    cache = {}
    probs = forward(P, batch, cfg, rng, cache)
    labels = batch.labels
    S = labels.size
    loss = span_loss(probs, labels, negative_weight)
    dt = probs.dtype
    w = np.where(labels == 0, negative_weight, 1.0).astype(dt)
    dlogits = probs.copy()
    dlogits[np.arange(S), labels] -= 1
    dlogits *= (w / S)[:, None]

    G = {}
    starts, ends, lengths, arg, mask, pooled_d, idx, ln, y = cache["head"]
    G["out_W"] = dlogits.T @ y
    G["out_b"] = dlogits.sum(axis=0)
    dy = dlogits @ P["out_W"]
    dh, G["hid_g"], G["hid_beta"] = _layernorm_back(dy, P["hid_g"], ln)
    dpool, G["hid_W"], G["hid_b"] = _maxout_back(dh, pooled_d, P["hid_W"], idx,
                                                 cfg.maxout_pieces)
    if mask is not None:
        dpool = dpool * mask
    width = cfg.width
    M = batch.rows.shape[0]
    dmean = dpool[:, :width] / lengths
    # difference array spreads each span's mean gradient over its rows
    diff = scatter_rows(np.concatenate([starts, ends]), np.concatenate([dmean, -dmean]), M + 1)
    dH = np.cumsum(diff, axis=0)[:M].astype(dt)
    dH += span_max_pool_backward(np.ascontiguousarray(dpool[:, width:]), arg, M)

    offsets = range(-cfg.window, cfg.window + 1)
    pos = batch.pos
    for layer in reversed(range(cfg.depth)):
        Z, idx, ln = cache["encode"][layer]
        dh, G[f"enc{layer}_g"], G[f"enc{layer}_beta"] = _layernorm_back(
            dH, P[f"enc{layer}_g"], ln)
        dZ, G[f"enc{layer}_W"], G[f"enc{layer}_b"] = _maxout_back(
            dh, Z, P[f"enc{layer}_W"], idx, cfg.maxout_pieces)
        dbuf = np.zeros((batch.n_padded, width), dtype=dt)
        for k, o in enumerate(offsets):
            dbuf[pos + o] += dZ[:, k * width:(k + 1) * width]
        dH = dH + dbuf[pos]

    rows, emask, Ed, idx, ln = cache["embed"]
    dh, G["mix_g"], G["mix_beta"] = _layernorm_back(dH, P["mix_g"], ln)
    dE, G["mix_W"], G["mix_b"] = _maxout_back(dh, Ed, P["mix_W"], idx, cfg.maxout_pieces)
    if emask is not None:
        dE = dE * emask
    sub = width // 4
    for k in range(4):
        G[f"embed{k}"] = scatter_rows(rows[:, k], dE[:, k * sub:(k + 1) * sub],
                                      P[f"embed{k}"].shape[0]).astype(dt)
    return loss, G


# ---------------------------------------------------------------- model

@dataclass
class SpanModel:
    characteristic_id: str
    classes: list
    config: SpanModelConfig
    params: dict
    ontology_version: int = 1
    training_log: list = field(default_factory=list)
    sweep_log: list = field(default_factory=list)

    def _items(self, tokdocs):
        cfg = self.config
        return [(hash_rows(td, cfg.embed_rows), suggest_spans(td, cfg.suggester), None)
                for td in tokdocs]

    def span_probs(self, tokdocs, batch_size: int = 32):
        """Per document: (spans array, class probability matrix)."""
        out = []
        tokdocs = list(tokdocs)
        for b in range(0, len(tokdocs), batch_size):
            chunk = [td for td in tokdocs[b:b + batch_size]]
            items = self._items(chunk)
            live = [k for k, it in enumerate(items) if it[1].shape[0]]
            res = {k: (items[k][1], np.zeros((0, len(self.classes)))) for k in range(len(chunk))}
            if live:
                batch = make_batch([items[k] for k in live], self.config.window)
                probs = forward(self.params, batch, self.config)
                for n, k in enumerate(live):
                    res[k] = (items[k][1], probs[batch.doc_index == n])
            out.extend(res[k] for k in range(len(chunk)))
        return out

    def predict_ranges(self, tokdocs, threshold: float = 0.5):
        """Per document: non-overlapping (start_tok, end_tok, label, prob)."""
        results = []
        for spans, probs in self.span_probs(tokdocs):
            if not len(spans):
                results.append([])
                continue
            best = probs.argmax(axis=1)
            conf = probs[np.arange(len(best)), best]
            keep = np.nonzero((best > 0) & (conf >= threshold))[0]
            cands = sorted(keep, key=lambda s: (-conf[s], -(spans[s, 1] - spans[s, 0]),
                                                spans[s, 0]))
            taken = []
            for s in cands:
                i, j = int(spans[s, 0]), int(spans[s, 1])
                if any(i < b and a < j for a, b, _, _ in taken):
                    continue
                taken.append((i, j, self.classes[best[s]], float(conf[s])))
            taken.sort()
            results.append(taken)
        return results

    def classify_range(self, tokdoc: TokenizedDocument, i: int, j: int) -> np.ndarray:
        """Class probabilities for the exact token range ``[i, j)``."""
        if not 0 <= i < j <= len(tokdoc):
            raise ValidationError(f"invalid token range [{i}, {j})")
        batch = make_batch([(hash_rows(tokdoc, self.config.embed_rows),
                             np.array([[i, j]]), None)], self.config.window)
        return forward(self.params, batch, self.config)[0]

    def header(self) -> dict:
        return {"kind": "span_model", "characteristic": self.characteristic_id,
                "classes": [c.value for c in self.classes], "config": self.config.to_json(),
                "ontology_version": self.ontology_version,
                "training_log": self.training_log, "sweep_log": self.sweep_log}

    def save(self, path) -> None:
        modelio.save(path, self.header(), self.params)

    @classmethod
    def load(cls, path) -> "SpanModel":
        header, tensors = modelio.load(path)
        if header.get("kind") != "span_model":
            raise ValidationError(f"{path}: not a span model")
        return cls(header["characteristic"], [SeverityLabel(c) for c in header["classes"]],
                   SpanModelConfig.from_json(header["config"]), tensors,
                   header.get("ontology_version", 1), header.get("training_log", []),
                   header.get("sweep_log", []))


# ---------------------------------------------------------------- training

def _gold_ranges(doc, tokdoc, char_id):
    out = []
    for s in doc.spans_for(char_id):
        i, j = tokdoc.token_range(s.start, s.end)
        if j > i:
            out.append((i, j, s.label))
    return out


@dataclass
class PreparedDoc:
    """Characteristic-independent inputs of one document."""

    doc: object
    tokdoc: TokenizedDocument
    rows: np.ndarray
    spans: np.ndarray


def prepare_docs(docs, cfg: SpanModelConfig) -> list:
    """Tokenize, hash and enumerate suggestions once for reuse across models."""
    out = []
    for d in docs:
        td = tokenize(d.text, d.doc_id)
        out.append(PreparedDoc(d, td, hash_rows(td, cfg.embed_rows),
                               suggest_spans(td, cfg.suggester)))
    return out


def _label_items(prepared, char_id, classes):
    index = {c: k for k, c in enumerate(classes)}
    items, golds = [], []
    for p in prepared:
        if not len(p.tokdoc):
            continue
        gold = _gold_ranges(p.doc, p.tokdoc, char_id)
        labels = np.zeros(p.spans.shape[0], dtype=np.int64)
        for i, j, lab in gold:
            hit = np.nonzero((p.spans[:, 0] == i) & (p.spans[:, 1] == j))[0]
            if hit.size:
                labels[hit[0]] = index[lab]
        items.append((p.rows, p.spans, labels))
        golds.append((p.tokdoc, gold))
    return items, golds


def _dev_score(model: SpanModel, golds, threshold=0.5) -> float:
    preds = model.predict_ranges([td for td, _ in golds], threshold)
    return span_f1([g for _, g in golds], [[(i, j, lab) for i, j, lab, _ in p] for p in preds],
                   model.classes)


def train_span_model(train_docs, char_id: str, config: SpanModelConfig,
                     ontology: Ontology, threshold: float = 0.5) -> SpanModel:
    """Train one characteristic's span classifier with early stopping on a dev shard.

    ``train_docs`` may be AnnotatedDocuments or the output of
    :func:`prepare_docs` (reused across characteristics and sweep runs).
    """
    cfg = config
    ch = ontology[char_id]
    classes = list(ch.ordered_labels)
    docs = list(train_docs)
    if docs and not isinstance(docs[0], PreparedDoc):
        docs = prepare_docs(docs, cfg)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(docs))
    n_dev = max(1, int(round(cfg.dev_fraction * len(docs)))) if len(docs) > 1 else 0
    dev_docs = [docs[i] for i in sorted(perm[:n_dev])]
    fit_docs = [docs[i] for i in sorted(perm[n_dev:])]
    items, _ = _label_items(fit_docs, char_id, classes)
    _, dev_golds = _label_items(dev_docs, char_id, classes)
    counts = np.bincount(np.concatenate([it[2] for it in items]) if items else [0],
                         minlength=len(classes))
    if counts[1:].sum() == 0:
        raise TrainingError(f"no positive spans for {char_id} in the training data")
    for c, n in zip(classes[1:], counts[1:]):
        if 0 < n < 50:
            log.warning("%s: only %d training spans for class %s", char_id, n, c.value)

    params = init_params(cfg, len(classes), seed=cfg.seed)
    if cfg.prior_bias:
        # start from the class priors so early steps need not learn them
        prior = (counts + 1.0) / (counts.sum() + len(classes))
        params["out_b"] = np.log(prior).astype(params["out_b"].dtype)
    model = SpanModel(char_id, classes, cfg, params, ontology.version)
    opt = Adam(params, cfg.lr)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    order_rng = np.random.default_rng([cfg.seed, 2])
    best = (-1.0, 0, copy.deepcopy(params))
    order = order_rng.permutation(len(items))
    cursor = 0
    recent = []
    train_log = []
    for step in range(1, cfg.max_steps + 1):
        if cursor >= len(order):
            order = order_rng.permutation(len(items))
            cursor = 0
        chunk = [items[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        batch = make_batch(chunk, cfg.window)
        loss, grads = loss_and_grads(params, batch, cfg, cfg.negative_weight, drop_rng)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} for {char_id}")
        opt.step(params, grads)
        recent.append(loss)
        if step % cfg.eval_frequency == 0 or step == cfg.max_steps:
            score = _dev_score(model, dev_golds, threshold) if dev_golds else 0.0
            train_log.append({"step": step, "loss": round(float(np.mean(recent)), 6),
                              "dev_f1": round(score, 6)})
            recent = []
            if score > best[0]:
                best = (score, step, copy.deepcopy(params))
            log.info("%s nw=%.1f step %d loss %.4f dev F1 %.4f", char_id,
                     cfg.negative_weight, step, train_log[-1]["loss"], score)
            # a perfect dev score cannot be improved, so waiting longer changes nothing
            if step - best[1] >= cfg.patience or best[0] >= 1.0 - 1e-9:
                break
    model.params = best[2]
    model.training_log = train_log + [{"best_step": best[1], "best_dev_f1": round(best[0], 6)}]
    return model


def train_sweep(train_docs, char_id: str, config: SpanModelConfig, ontology: Ontology,
                weights=SWEEP_WEIGHTS, threshold: float = 0.5) -> SpanModel:
    """Train at each negative weight and keep the best dev weighted F1.

    Ties go to the earlier weight.  The winner carries a sweep log with
    every weight's score.
    """
    best = None
    sweep = []
    train_docs = list(train_docs)
    if train_docs and not isinstance(train_docs[0], PreparedDoc):
        train_docs = prepare_docs(train_docs, config)
    for w in weights:
        cfg = SpanModelConfig.from_json({**config.to_json(), "negative_weight": w})
        m = train_span_model(train_docs, char_id, cfg, ontology, threshold)
        score = m.training_log[-1]["best_dev_f1"]
        sweep.append({"negative_weight": w, "dev_f1": score,
                      "best_step": m.training_log[-1]["best_step"]})
        if best is None or score > best[0]:
            best = (score, m)
    model = best[1]
    model.sweep_log = sweep + [{"selected": model.config.negative_weight}]
    return model


def predict_spans(doc, models: dict, threshold: float = 0.5) -> list:
    """Spans for one document from per-characteristic models."""
    return predict_corpus([doc], models, threshold)[0]


def predict_corpus(docs, models: dict, threshold: float = 0.5) -> list:
    """Predicted SpanAnnotations per document (docs may be raw texts)."""
    tokdocs = []
    for d in docs:
        if isinstance(d, TokenizedDocument):
            tokdocs.append(d)
        elif isinstance(d, str):
            tokdocs.append(tokenize(d))
        else:
            tokdocs.append(tokenize(d.text, d.doc_id))
    out = [[] for _ in tokdocs]
    for cid in sorted(models):
        for k, ranges in enumerate(models[cid].predict_ranges(tokdocs, threshold)):
            td = tokdocs[k]
            for i, j, lab, _ in ranges:
                start, end = td.char_span(i, j)
                out[k].append(SpanAnnotation(start, end, cid, lab))
    for spans in out:
        spans.sort(key=lambda s: (s.start, s.end, s.characteristic_id))
    return out
