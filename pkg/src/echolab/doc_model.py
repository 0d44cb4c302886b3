"""Direct document classifiers and the span -> document heuristic.

* BOW: TF-IDF over NORM tokens concatenated with LDA topic
  probabilities, classified by one-vs-rest gradient-boosted trees.
* CNN: trainable embeddings, 1-D convolutions over the forward and the
  reversed token sequence, max-over-time pooling, one hidden layer.
"""
from __future__ import annotations

import logging
import math
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import modelio
from .errors import TrainingError, ValidationError
from .kernels import best_splits, gibbs_sweep
from .nn import Adam, glorot, scatter_rows, softmax
from .ontology import LABELS_BY_RANK, SeverityLabel, aggregate_labels
from .textproc import tokenize

log = logging.getLogger(__name__)


def doc_norms(doc) -> list:
    text = doc if isinstance(doc, str) else doc.text
    return tokenize(text).norms


# ---------------------------------------------------------------- vocabulary / TF-IDF

class Vocabulary:
    """NORM string -> column index, most frequent (by document frequency) first."""

    def __init__(self, terms):
        self.terms = list(terms)
        self.index = {t: i for i, t in enumerate(self.terms)}
        if len(self.index) != len(self.terms):
            raise ValidationError("vocabulary terms must be unique")

    def __len__(self):
        return len(self.terms)

    @classmethod
    def build(cls, token_lists, max_size: int = 5000) -> "Vocabulary":
        df = Counter()
        for toks in token_lists:
            df.update(set(toks))
        ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([t for t, _ in ranked[:max_size]])

    def ids(self, tokens) -> list:
        return [self.index[t] for t in tokens if t in self.index]


@dataclass
class TfidfModel:
    vocab: Vocabulary
    idf: np.ndarray

    def transform(self, token_lists) -> np.ndarray:
        """Dense (n_docs, |vocab|) L2-normalised TF-IDF rows; OOV tokens dropped."""
        token_lists = list(token_lists)
        X = np.zeros((len(token_lists), len(self.vocab)), dtype=np.float64)
        for r, toks in enumerate(token_lists):
            for c, n in Counter(self.vocab.ids(toks)).items():
                X[r, c] = n
        X *= self.idf[None, :]
        norms = np.linalg.norm(X, axis=1)
        nz = norms > 0
        X[nz] /= norms[nz, None]
        return X


def fit_tfidf(token_lists, max_vocab: int = 5000) -> TfidfModel:
    """Raw-count tf, smoothed idf = ln((1+N)/(1+df)) + 1."""
    token_lists = [list(t) for t in token_lists]
    if not token_lists:
        raise ValidationError("cannot fit TF-IDF on an empty corpus")
    vocab = Vocabulary.build(token_lists, max_vocab)
    if not len(vocab):
        raise ValidationError("empty vocabulary")
    df = np.zeros(len(vocab))
    for toks in token_lists:
        for c in set(vocab.ids(toks)):
            df[c] += 1
    n = len(token_lists)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    return TfidfModel(vocab, idf)


# ---------------------------------------------------------------- LDA

@dataclass
class LdaModel:
    n_topics: int
    topic_word: np.ndarray  # (K, V) counts
    alpha: float = 0.1
    beta: float = 0.01
    infer_sweeps: int = 50
    seed: int = 0

    def phi(self) -> np.ndarray:
        """Smoothed topic-word distributions (rows sum to 1)."""
        tw = self.topic_word + self.beta
        return tw / tw.sum(axis=1, keepdims=True)

    def infer(self, word_ids) -> np.ndarray:
        """Topic probabilities of one document (ids into the LDA vocabulary)."""
        return self.infer_many([word_ids])[0]

    def infer_many(self, docs) -> np.ndarray:
        K = self.n_topics
        out = np.empty((len(docs), K))
        nkw = self.topic_word.astype(np.int64)
        nk = nkw.sum(axis=1)
        for r, ids in enumerate(docs):
            ids = np.asarray(ids, dtype=np.int64)
            if ids.size == 0 or K == 1:
                out[r] = 1.0 / K
                continue
            # per-document stream: identical token ids always infer identically
            rng = np.random.default_rng([self.seed, zlib.crc32(ids.tobytes())])
            z = rng.integers(0, K, ids.size)
            ndk = np.bincount(z, minlength=K).astype(np.int64)[None, :]
            doc = np.zeros(ids.size, dtype=np.int64)
            u = rng.random((self.infer_sweeps, ids.size))
            for s in range(self.infer_sweeps):
                gibbs_sweep(doc, ids, z, ndk, nkw, nk, self.alpha, self.beta, u[s],
                            update_topics=False)
            theta = ndk[0] + self.alpha
            out[r] = theta / theta.sum()
        return out


def fit_lda(word_docs, vocab_size: int, n_topics: int = 20, alpha: float = 0.1,
            beta: float = 0.01, sweeps: int = 200, infer_sweeps: int = 50, seed: int = 0,
            callback=None) -> LdaModel:
    """Collapsed Gibbs sampling over documents given as lists of word ids.

    ``callback(sweep, nkw)`` is called after every sweep when given.
    """
    if n_topics < 1:
        raise ValidationError("n_topics must be >= 1")
    word_docs = [np.asarray(d, dtype=np.int64) for d in word_docs]
    if not word_docs or not sum(d.size for d in word_docs):
        raise ValidationError("cannot fit LDA on an empty corpus")
    rng = np.random.default_rng(seed)
    doc = np.concatenate([np.full(d.size, i) for i, d in enumerate(word_docs)]).astype(np.int64)
    word = np.concatenate(word_docs)
    z = rng.integers(0, n_topics, word.size).astype(np.int64)
    ndk = np.zeros((len(word_docs), n_topics), dtype=np.int64)
    nkw = np.zeros((n_topics, vocab_size), dtype=np.int64)
    np.add.at(ndk, (doc, z), 1)
    np.add.at(nkw, (z, word), 1)
    nk = nkw.sum(axis=1)
    for s in range(sweeps):
        gibbs_sweep(doc, word, z, ndk, nkw, nk, alpha, beta, rng.random(word.size))
        if callback is not None:
            callback(s, nkw)
    return LdaModel(n_topics, nkw.astype(np.float64), alpha, beta, infer_sweeps, seed)


# ---------------------------------------------------------------- gradient boosting

@dataclass
class GbdtConfig:
    n_estimators: int = 150
    max_depth: int = 5
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    seed: int = 42


class ColumnIndex:
    """Positive entries of each feature column sorted by value (zeros implicit)."""

    def __init__(self, X):
        X = np.asarray(X, dtype=np.float32)
        if (X < 0).any():
            raise ValidationError("tree features must be nonnegative")
        ptr, samples, values = [0], [], []
        for f in range(X.shape[1]):
            idx = np.nonzero(X[:, f] > 0)[0]
            idx = idx[np.argsort(X[idx, f], kind="stable")]
            samples.append(idx)
            values.append(X[idx, f])
            ptr.append(ptr[-1] + idx.size)
        self.X = X
        self.ptr = np.asarray(ptr, dtype=np.int64)
        self.samples = np.concatenate(samples).astype(np.int64) if samples else np.zeros(0, int)
        self.values = np.concatenate(values).astype(np.float32) if values else np.zeros(0, "f4")


@dataclass
class Tree:
    """Flat node arrays; ``feature`` -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            go_left = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])
        return self.value[node].astype(np.float64)

    def to_array(self) -> np.ndarray:
        return np.stack([self.feature, self.threshold, self.left, self.right, self.value],
                        axis=1).astype(np.float32)

    @classmethod
    def from_array(cls, a) -> "Tree":
        a = np.asarray(a, dtype=np.float32)
        return cls(a[:, 0].astype(np.int64), a[:, 1].copy(), a[:, 2].astype(np.int64),
                   a[:, 3].astype(np.int64), a[:, 4].copy())


def build_tree(cols: ColumnIndex, g, h, cfg: GbdtConfig) -> tuple:
    """Level-wise exact greedy Newton tree; returns (tree, per-sample leaf values)."""
    n = g.shape[0]
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    node_of = np.zeros(n, dtype=np.int64)      # index into the current level
    level_ids = [0]                            # tree node id of each level index
    pred = np.zeros(n)
    lam = cfg.reg_lambda

    def leaf(tid, G, H):
        value[tid] = float(np.float32(-G / (H + lam) * cfg.learning_rate))

    for depth in range(cfg.max_depth + 1):
        if not level_ids:
            break
        if depth == cfg.max_depth:
            act = node_of >= 0
            G = np.bincount(node_of[act], weights=g[act], minlength=len(level_ids))
            H = np.bincount(node_of[act], weights=h[act], minlength=len(level_ids))
            for k, tid in enumerate(level_ids):
                leaf(tid, G[k], H[k])
            break
        gain, feat, thr, G, H = best_splits(cols.ptr, cols.samples, cols.values, node_of, g, h,
                                            lam, cfg.min_child_weight)
        remap = np.full(len(level_ids), -1, dtype=np.int64)
        next_ids = []
        for k, tid in enumerate(level_ids):
            if feat[k] < 0:
                leaf(tid, G[k], H[k])
                continue
            feature[tid], threshold[tid] = int(feat[k]), float(thr[k])
            for side in (left, right):
                side[tid] = len(feature)
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
            remap[k] = len(next_ids)
            next_ids += [left[tid], right[tid]]
        act = np.nonzero(node_of >= 0)[0]
        k = node_of[act]
        split = remap[k] >= 0
        done = act[~split]
        pred[done] = np.asarray(value)[np.asarray(level_ids)[k[~split]]]
        node_of[done] = -1
        s = act[split]
        ks = k[split]
        go_left = cols.X[s, feat[ks]] <= thr[ks]
        node_of[s] = remap[ks] + np.where(go_left, 0, 1)
        level_ids = next_ids
    act = node_of >= 0
    vals = np.asarray(value)
    pred[act] = vals[np.asarray(level_ids, dtype=np.int64)[node_of[act]]] if level_ids else 0.0
    tree = Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.float32),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                vals.astype(np.float32))
    return tree, pred


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logloss(y, F):
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


@dataclass
class GbdtModel:
    classes: list
    base: np.ndarray                     # (C,) initial log-odds, float32
    trees: list                          # per class: list of Tree
    config: GbdtConfig = field(default_factory=GbdtConfig)
    train_loss: list = field(default_factory=list)  # per class, per round

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        S = np.tile(self.base.astype(np.float64), (X.shape[0], 1))
        for c, trees in enumerate(self.trees):
            for t in trees:
                S[:, c] += t.predict(X)
        return S

    def predict(self, X) -> list:
        return [self.classes[i] for i in self.decision_function(X).argmax(axis=1)]


def train_gbdt(X, y, config: GbdtConfig | None = None, classes=None) -> GbdtModel:
    """One-vs-rest logistic boosting with depth-limited exact-greedy trees.

    ``y`` holds class labels; ``classes`` fixes the class order (default:
    sorted unique labels).  Needs at least two distinct labels.
    """
    cfg = config or GbdtConfig()
    y = list(y)
    present = sorted(set(y), key=lambda c: (str(type(c)), c))
    if len(present) < 2:
        raise TrainingError("gradient boosting needs at least two classes in training data")
    classes = list(classes) if classes is not None else present
    classes = [c for c in classes if c in set(y)]
    cols = ColumnIndex(X)
    base, all_trees, losses = [], [], []
    for c in classes:
        yc = np.array([1.0 if v == c else 0.0 for v in y])
        p = min(max(yc.mean(), 1e-6), 1 - 1e-6)
        b = float(np.float32(math.log(p / (1 - p))))
        F = np.full(yc.size, b)
        trees, curve = [], [_logloss(yc, F)]
        for _ in range(cfg.n_estimators):
            prob = _sigmoid(F)
            g = prob - yc
            h = np.maximum(prob * (1.0 - prob), 1e-16)
            tree, step = build_tree(cols, g, h, cfg)
            F = F + step
            trees.append(tree)
            curve.append(_logloss(yc, F))
        base.append(b)
        all_trees.append(trees)
        losses.append(curve)
    return GbdtModel(classes, np.asarray(base, dtype=np.float32), all_trees, cfg, losses)


# ---------------------------------------------------------------- BOW pipeline

@dataclass
class BowConfig:
    max_vocab: int = 5000
    n_topics: int = 20
    alpha: float = 0.1
    beta: float = 0.01
    lda_sweeps: int = 200
    infer_sweeps: int = 50
    n_estimators: int = 150
    max_depth: int = 5
    learning_rate: float = 0.1
    seed: int = 42

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})

    def gbdt(self) -> GbdtConfig:
        return GbdtConfig(self.n_estimators, self.max_depth, self.learning_rate, seed=self.seed)


@dataclass
class BowDocModel:
    """Shared TF-IDF + LDA features with one boosted classifier per characteristic."""

    config: BowConfig
    tfidf: TfidfModel
    lda: LdaModel
    heads: dict                           # char_id -> GbdtModel
    ontology_version: int = 1
    scheme: str = "full"

    def features(self, docs) -> np.ndarray:
        toks = [doc_norms(d) for d in docs]
        X = self.tfidf.transform(toks)
        T = self.lda.infer_many([self.tfidf.vocab.ids(t) for t in toks])
        return np.concatenate([X, T], axis=1).astype(np.float32)

    def predict(self, docs, X=None) -> list:
        """Per document: {char_id: SeverityLabel}."""
        docs = list(docs)
        X = self.features(docs) if X is None else X
        out = [dict() for _ in docs]
        for cid, head in sorted(self.heads.items()):
            for r, lab in enumerate(head.predict(X)):
                out[r][cid] = lab
        return out

    def save(self, path):
        header = {"kind": "bow_doc_model", "config": self.config.to_json(),
                  "vocab": self.tfidf.vocab.terms, "ontology_version": self.ontology_version,
                  "scheme": self.scheme, "heads": {}}
        tensors = {"idf": self.tfidf.idf, "topic_word": self.lda.topic_word}
        for cid, head in sorted(self.heads.items()):
            counts = [len(t) for t in head.trees]
            header["heads"][cid] = {"classes": [c.value for c in head.classes],
                                    "trees_per_class": counts,
                                    "nodes": [[len(t.feature) for t in trees]
                                              for trees in head.trees]}
            tensors[f"{cid}/base"] = head.base
            flat = [t.to_array() for trees in head.trees for t in trees]
            tensors[f"{cid}/trees"] = (np.concatenate(flat) if flat
                                       else np.zeros((0, 5), np.float32))
        modelio.save(path, header, tensors)

    @classmethod
    def load(cls, path) -> "BowDocModel":
        header, t = modelio.load(path)
        if header.get("kind") != "bow_doc_model":
            raise ValidationError(f"{path}: not a BOW document model")
        cfg = BowConfig.from_json(header["config"])
        tfidf = TfidfModel(Vocabulary(header["vocab"]), t["idf"].astype(np.float64))
        lda = LdaModel(cfg.n_topics, t["topic_word"].astype(np.float64), cfg.alpha, cfg.beta,
                       cfg.infer_sweeps, cfg.seed)
        heads = {}
        for cid, spec in header["heads"].items():
            arr = t[f"{cid}/trees"]
            trees, off = [], 0
            for sizes in spec["nodes"]:
                cls_trees = []
                for n in sizes:
                    cls_trees.append(Tree.from_array(arr[off:off + n]))
                    off += n
                trees.append(cls_trees)
            heads[cid] = GbdtModel([SeverityLabel(c) for c in spec["classes"]],
                                   t[f"{cid}/base"], trees, cfg.gbdt())
        return cls(cfg, tfidf, lda, heads, header.get("ontology_version", 1),
                   header.get("scheme", "full"))


def train_bow(train_docs, ontology, config: BowConfig | None = None, char_ids=None,
              scheme: str = "full") -> BowDocModel:
    """Fit TF-IDF and LDA on the training split, then one booster per characteristic.

    Document labels are read from ``doc_labels`` so a simplified corpus
    (see ``corpus.apply_scheme``) trains a simplified model unchanged.
    """
    cfg = config or BowConfig()
    docs = list(train_docs)
    toks = [doc_norms(d) for d in docs]
    tfidf = fit_tfidf(toks, cfg.max_vocab)
    ids = [tfidf.vocab.ids(t) for t in toks]
    lda = fit_lda(ids, len(tfidf.vocab), cfg.n_topics, cfg.alpha, cfg.beta, cfg.lda_sweeps,
                  cfg.infer_sweeps, cfg.seed)
    model = BowDocModel(cfg, tfidf, lda, {}, ontology.version, scheme)
    X = np.concatenate([tfidf.transform(toks), lda.infer_many(ids)], axis=1).astype(np.float32)
    for ch in ontology:
        if char_ids is not None and ch.id not in char_ids:
            continue
        y = [d.label(ch.id) for d in docs]
        model.heads[ch.id] = train_gbdt(X, y, cfg.gbdt(), classes=LABELS_BY_RANK)
        log.info("bow: trained %s", ch.id)
    return model


# ---------------------------------------------------------------- CNN

PAD, OOV = 0, 1


@dataclass
class CnnConfig:
    vocab_size: int = 5000
    embed_dim: int = 300
    filters: int = 96
    kernel_sizes: tuple = (3, 4, 5)
    hidden: int = 10
    dropout: float = 0.2
    max_len: int = 200
    lr: float = 0.0025
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if min(self.vocab_size, self.embed_dim, self.filters, self.hidden, self.max_len,
               self.batch_size, self.epochs) <= 0 or not self.kernel_sizes:
            raise ValidationError("CNN sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")

    def to_json(self):
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_json(cls, obj):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


def cnn_init(cfg: CnnConfig, n_vocab: int, n_classes: int, dtype=np.float32) -> dict:
    rng = np.random.default_rng(cfg.seed)
    D, F = cfg.embed_dim, cfg.filters
    P = {"embed": rng.uniform(-0.05, 0.05, (n_vocab, D))}
    P["embed"][PAD] = 0.0
    for branch in ("fwd", "rev"):
        for k in cfg.kernel_sizes:
            P[f"{branch}{k}_W"] = glorot(rng, (k, D, F), k * D, F)
            P[f"{branch}{k}_b"] = np.zeros(F)
    n_pool = 2 * len(cfg.kernel_sizes) * F
    P["hid_W"] = glorot(rng, (n_pool, cfg.hidden), n_pool, cfg.hidden)
    P["hid_b"] = np.zeros(cfg.hidden)
    P["out_W"] = glorot(rng, (cfg.hidden, n_classes), cfg.hidden, n_classes)
    P["out_b"] = np.zeros(n_classes)
    return {k: v.astype(dtype) for k, v in P.items()}


def encode_ids(vocab: Vocabulary, tokens, max_len: int) -> np.ndarray:
    ids = [vocab.index[t] + 2 if t in vocab.index else OOV for t in tokens[:max_len]]
    return np.asarray(ids, dtype=np.int64)


def _pad_batch(seqs, min_len: int):
    T = max(max((len(s) for s in seqs), default=0), min_len)
    fwd = np.zeros((len(seqs), T), dtype=np.int64)
    rev = np.zeros((len(seqs), T), dtype=np.int64)
    lens = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        fwd[i, :len(s)] = s
        rev[i, :len(s)] = s[::-1]
        lens[i] = len(s)
    return fwd, rev, lens


def _branch_forward(P, ids, lens, branch, cfg, cache):
    """Convolutions of one direction; returns pooled (B, n_kernels * F)."""
    B, T = ids.shape
    kmax = max(cfg.kernel_sizes)
    padded = np.zeros((B, T + kmax - 1), dtype=np.int64)
    padded[:, :T] = ids
    uniq, inv = np.unique(padded, return_inverse=True)
    inv = inv.reshape(padded.shape)
    Eu = P["embed"][uniq]
    F = cfg.filters
    # project each distinct token through every kernel offset once, then gather
    Wcat = np.concatenate([P[f"{branch}{k}_W"][j] for k in cfg.kernel_sizes for j in range(k)],
                          axis=1)
    Pall = Eu @ Wcat
    G = Pall[inv]                                   # (B, T+kmax-1, sum_k k*F)
    pooled, argpos, masks = [], [], []
    col = 0
    for k in cfg.kernel_sizes:
        Tk = T
        conv = np.zeros((B, Tk, F), dtype=Pall.dtype)
        for j in range(k):
            conv += G[:, j:j + Tk, col + j * F:col + (j + 1) * F]
        conv += P[f"{branch}{k}_b"]
        act = np.maximum(conv, 0)
        valid = np.arange(Tk)[None, :] < np.maximum(lens - k + 1, 1)[:, None]
        masked = np.where(valid[..., None], act, -np.inf)
        t_star = masked.argmax(axis=1)                        # (B, F)
        pooled.append(np.take_along_axis(act, t_star[:, None, :], axis=1)[:, 0, :])
        argpos.append((t_star, np.take_along_axis(conv, t_star[:, None, :], axis=1)[:, 0, :]))
        col += k * F
    if cache is not None:
        cache[branch] = (uniq, inv, Eu, Wcat, argpos)
    return np.concatenate(pooled, axis=1)


def _branch_backward(P, dpool, branch, cfg, cache, G_out):
    uniq, inv, Eu, Wcat, argpos = cache[branch]
    B = dpool.shape[0]
    F = cfg.filters
    rows = np.arange(B)[:, None]
    idx_list, val_list = [], []
    col = 0
    dPall_parts = []
    U = uniq.size
    for n, k in enumerate(cfg.kernel_sizes):
        t_star, pre = argpos[n]
        d = dpool[:, n * F:(n + 1) * F] * (pre > 0)
        G_out[f"{branch}{k}_b"] = d.sum(axis=0)
        for j in range(k):
            tok = inv[rows, t_star + j]                       # (B, F) distinct-token index
            flat = (tok * F + np.arange(F)[None, :]).ravel()
            dP = np.bincount(flat, weights=d.ravel().astype(np.float64), minlength=U * F)
            dPall_parts.append(dP.reshape(U, F))
        col += k * F
    dPall = np.concatenate(dPall_parts, axis=1).astype(Eu.dtype)
    dWcat = Eu.T @ dPall
    col = 0
    for k in cfg.kernel_sizes:
        G_out[f"{branch}{k}_W"] = np.stack(
            [dWcat[:, col + j * F:col + (j + 1) * F] for j in range(k)])
        col += k * F
    return uniq, dPall @ Wcat.T


def cnn_forward(P, fwd, rev, lens, cfg, rng=None, cache=None):
    pooled = np.concatenate([_branch_forward(P, fwd, lens, "fwd", cfg, cache),
                             _branch_forward(P, rev, lens, "rev", cfg, cache)], axis=1)
    mask = None
    if rng is not None and cfg.dropout > 0:
        mask = ((rng.random(pooled.shape, dtype=np.float32) >= cfg.dropout)
                .astype(pooled.dtype) / pooled.dtype.type(1.0 - cfg.dropout))
    x = pooled * mask if mask is not None else pooled
    hpre = x @ P["hid_W"] + P["hid_b"]
    h = np.maximum(hpre, 0)
    probs = softmax(h @ P["out_W"] + P["out_b"])
    if cache is not None:
        cache["head"] = (x, mask, hpre, h)
    return probs


def cnn_loss_and_grads(P, fwd, rev, lens, labels, cfg, rng=None):
    cache = {}
    probs = cnn_forward(P, fwd, rev, lens, cfg, rng, cache)
    B = labels.size
    loss = float(-np.log(probs[np.arange(B), labels]).mean())
    x, mask, hpre, h = cache["head"]
    dlog = probs.copy()
    dlog[np.arange(B), labels] -= 1
    dlog /= B
    G = {"out_W": h.T @ dlog, "out_b": dlog.sum(axis=0)}
    dh = (dlog @ P["out_W"].T) * (hpre > 0)
    G["hid_W"] = x.T @ dh
    G["hid_b"] = dh.sum(axis=0)
    dx = dh @ P["hid_W"].T
    if mask is not None:
        dx = dx * mask
    half = dx.shape[1] // 2
    dE = np.zeros(P["embed"].shape, dtype=np.float64)
    for branch, dpool in (("fwd", dx[:, :half]), ("rev", dx[:, half:])):
        uniq, dEu = _branch_backward(P, dpool, branch, cfg, cache, G)
        dE[uniq] += dEu
    dE[PAD] = 0.0
    G["embed"] = dE.astype(P["embed"].dtype)
    return loss, G


@dataclass
class CnnDocModel:
    characteristic_id: str
    classes: list
    vocab: Vocabulary
    config: CnnConfig
    params: dict
    ontology_version: int = 1
    scheme: str = "full"
    training_log: list = field(default_factory=list)

    def encode(self, docs) -> list:
        return [encode_ids(self.vocab, doc_norms(d), self.config.max_len) for d in docs]

    def predict_proba(self, docs=None, seqs=None, batch_size: int = 256) -> np.ndarray:
        seqs = self.encode(docs) if seqs is None else seqs
        out = []
        for b in range(0, len(seqs), batch_size):
            fwd, rev, lens = _pad_batch(seqs[b:b + batch_size], max(self.config.kernel_sizes))
            out.append(cnn_forward(self.params, fwd, rev, lens, self.config))
        return np.concatenate(out) if out else np.zeros((0, len(self.classes)))

    def predict(self, docs=None, seqs=None) -> list:
        return [self.classes[i] for i in self.predict_proba(docs, seqs).argmax(axis=1)]

    def save(self, path):
        header = {"kind": "cnn_doc_model", "characteristic": self.characteristic_id,
                  "classes": [c.value for c in self.classes], "vocab": self.vocab.terms,
                  "config": self.config.to_json(), "ontology_version": self.ontology_version,
                  "scheme": self.scheme, "training_log": self.training_log}
        modelio.save(path, header, self.params)

    @classmethod
    def load(cls, path) -> "CnnDocModel":
        header, t = modelio.load(path)
        if header.get("kind") != "cnn_doc_model":
            raise ValidationError(f"{path}: not a CNN document model")
        return cls(header["characteristic"], [SeverityLabel(c) for c in header["classes"]],
                   Vocabulary(header["vocab"]), CnnConfig.from_json(header["config"]), t,
                   header.get("ontology_version", 1), header.get("scheme", "full"),
                   header.get("training_log", []))


def train_cnn(train_docs, char_id: str, config: CnnConfig | None = None, ontology=None,
              vocab: Vocabulary | None = None, scheme: str = "full") -> CnnDocModel:
    """Mini-batch Adam on cross-entropy; deterministic per seed."""
    cfg = config or CnnConfig()
    docs = list(train_docs)
    toks = [doc_norms(d) for d in docs]
    vocab = vocab or Vocabulary.build(toks, cfg.vocab_size)
    seen = {d.label(char_id) for d in docs}
    admitted = set(ontology[char_id].admissible_labels) if ontology is not None else set()
    classes = [lab for lab in LABELS_BY_RANK if lab in seen or lab in admitted]
    if scheme == "simplified":
        classes = [lab for lab in classes if lab in seen]
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[d.label(char_id)] for d in docs], dtype=np.int64)
    if np.unique(y).size < 2:
        raise TrainingError(f"CNN for {char_id} needs at least two classes in training data")
    seqs = [encode_ids(vocab, t, cfg.max_len) for t in toks]
    params = cnn_init(cfg, len(vocab) + 2, len(classes))
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    kmin = max(cfg.kernel_sizes)
    train_log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(docs))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            fwd, rev, lens = _pad_batch([seqs[i] for i in idx], kmin)
            loss, G = cnn_loss_and_grads(params, fwd, rev, lens, y[idx], cfg, rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite CNN loss in epoch {epoch + 1} for {char_id}")
            opt.step(params, G)
            params["embed"][PAD] = 0.0
            losses.append(loss)
        train_log.append({"epoch": epoch + 1, "loss": round(float(np.mean(losses)), 6)})
        log.info("cnn %s epoch %d loss %.4f", char_id, epoch + 1, train_log[-1]["loss"])
    return CnnDocModel(char_id, classes, vocab, cfg, params,
                       getattr(ontology, "version", 1), scheme, train_log)


# ---------------------------------------------------------------- indirect

def spans_to_doc_label(spans) -> SeverityLabel:
    """Most severe predicted span label, NoLabel when there are none."""
    return aggregate_labels([s.label if hasattr(s, "label") else s for s in spans])
