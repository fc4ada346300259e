"""End-to-end training and evaluation for both tasks.

Per-bag forward pass: fit per-bag centroids from the stored embeddings,
select one representative per cluster, build the similarity graph, run the
attention stack, then either classify the pooled embedding or project it
into the decoder space and score the caption.  Stored embeddings are
constants; gradients reach the attention stack, heads, decoder, and prefix
projection.  Centroids are refit per forward pass (bags have unrelated
patch sets), so the clustering loss enters the reported total but cannot
push gradients into shared parameters.

Determinism: every stochastic draw (bag order, Gumbel edges, attention
dropout, sampling) derives from SeedSequence([seed, epoch, bag, stream]),
so logs are bitwise reproducible and independent of `jobs` parallelism.
"""

from __future__ import annotations

import json
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .bags import BagRecord, Dataset
from .captioning import CaptionParams, Vocabulary, caption_nll, generate
from .clustering import ClusterState, clustering_loss, dec_fit, soft_assign
from .gat import GatStack, gat_forward
from .heads import (ClassifierHead, bce_loss, classify, init_prefix_projection,
                    project_prefix, total_loss_caption,
                    total_loss_classification)
from .metrics import EvalReport, bleu, cider, classification_metrics, rouge_l
from .numerics import ContractError, Matrix, Node, backward, constant, parameter
from .optim import AdamState, adam_step
from .selection import select_representatives
from .simgraph import build_edges, cosine_similarity_matrix

CHECKPOINT_MAGIC = b"GMCK"
CHECKPOINT_VERSION = 1

_STREAM_EDGES = 0
_STREAM_DROPOUT = 1
_STREAM_ORDER = 2
_STREAM_SAMPLE = 3


@dataclass(frozen=True)
class TrainConfig:
    task: str = "classify"            # classify | caption
    lr: float = 1e-3
    weight_decay: float = 1e-2
    dropout: float = 0.3
    epochs: int = 100
    batch_size: int = 16
    K: int = 8
    tau: float = 1.0
    m_neighbors: int = 1
    lambda_clu: float = 1.0
    seed: int = 0
    d_out: int = 512
    gat_layers: int = 3
    mlp_hidden: int = 128
    d_model: int = 768
    n_heads: int = 4
    max_caption_len: int = 47
    leaky_slope: float = 0.2
    dec_lr: float = 0.05
    dec_train_iters: int = 20
    dec_eval_iters: int = 200
    dec_inner_steps: int = 10
    dec_epsilon: float = 1e-4
    pairwise_attention: bool = False
    symmetrize_edges: bool = True
    jobs: int = 1

    def __post_init__(self):
        if self.task not in ("classify", "caption"):
            raise ContractError(f"unknown task {self.task!r}")
        for name in ("lr", "epochs", "batch_size", "K", "tau", "m_neighbors",
                     "d_out", "gat_layers", "mlp_hidden", "d_model", "jobs"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    epoch: int
    rng_state: dict
    d_v: int
    vocab_tokens: list[str] | None = None


def _bag_rng(seed: int, epoch: int, bag_index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, epoch, bag_index, stream])))


class PipelineModel:
    """Named parameter store plus the per-bag forward pass."""

    def __init__(self, config: TrainConfig, d_v: int,
                 vocab: Vocabulary | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.d_v = d_v
        self.vocab = vocab
        if config.task == "caption" and vocab is None:
            raise ContractError("caption task needs a vocabulary")
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.config
        root = np.random.default_rng(cfg.seed)
        r_sel, r_gat, r_head, r_pref, r_cap = root.spawn(5)
        out: dict[str, np.ndarray] = {}
        s = 1.0 / np.sqrt(self.d_v)
        for name in ("selector.wq", "selector.wk", "selector.wv"):
            out[name] = r_sel.uniform(-s, s, size=(self.d_v, self.d_v))
        stack = GatStack.init(r_gat, d_in=self.d_v, d_out=cfg.d_out,
                              n_layers=cfg.gat_layers, slope=cfg.leaky_slope,
                              dropout=cfg.dropout)
        for i, layer in enumerate(stack.layers):
            out[f"gat.{i}.w"] = np.array(layer.w.data)
            out[f"gat.{i}.a"] = np.array(layer.a.data)
        head = ClassifierHead.init(r_head, d_in=cfg.d_out, hidden=cfg.mlp_hidden,
                                   slope=cfg.leaky_slope)
        out["head.w1"] = np.array(head.w1.data)
        out["head.b1"] = np.array(head.b1.data)
        out["head.w2"] = np.array(head.w2.data)
        out["head.b2"] = np.array(head.b2.data)
        out["prefix.wc"] = np.array(
            init_prefix_projection(r_pref, cfg.d_out, cfg.d_model).data)
        if self.config.task == "caption":
            cap = CaptionParams.init(r_cap, len(self.vocab), d_model=cfg.d_model,
                                     n_heads=cfg.n_heads,
                                     max_len=cfg.max_caption_len)
            for k, v in cap.named().items():
                out[f"cap.{k}"] = np.array(v.data)
        return out

    def param_nodes(self) -> dict[str, Node]:
        return {k: parameter(Matrix(v)) for k, v in self.params.items()}

    # ----- per-bag pipeline ------------------------------------------------

    def cluster_bag(self, bag: BagRecord, training: bool) -> ClusterState:
        cfg = self.config
        iters = cfg.dec_train_iters if training else cfg.dec_eval_iters
        return dec_fit(bag.embeddings, K=cfg.K, epsilon=cfg.dec_epsilon,
                       max_iters=iters, lr=cfg.dec_lr,
                       inner_steps=cfg.dec_inner_steps)

    def forward_bag(self, bag: BagRecord, nodes: dict[str, Node],
                    training: bool, epoch: int = 0, bag_index: int = 0,
                    centroid_node: Node | None = None) -> dict:
        """Runs clustering -> selection -> graph -> attention stack; returns
        the pooled embedding node, the clustering-loss node, and structure."""
        cfg = self.config
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")   # K > N_p clamp is routine here
            state = self.cluster_bag(bag, training)
        emb = constant(bag.embeddings)

        mu = centroid_node if centroid_node is not None \
            else constant(state.centroids)
        q_node = soft_assign(emb, mu, state.alpha)
        clu = clustering_loss(state.T, q_node)

        selection = select_representatives(
            emb, state.hard_assignments(),
            nodes["selector.wq"], nodes["selector.wk"], nodes["selector.wv"],
            pairwise=cfg.pairwise_attention)

        S = cosine_similarity_matrix(selection.representatives)
        if training:
            adjacency = build_edges(
                S, mode="train", m_neighbors=cfg.m_neighbors, tau=cfg.tau,
                rng=_bag_rng(cfg.seed, epoch, bag_index, _STREAM_EDGES),
                symmetrize=cfg.symmetrize_edges)
        else:
            adjacency = build_edges(S, mode="eval",
                                    m_neighbors=cfg.m_neighbors,
                                    symmetrize=cfg.symmetrize_edges)

        layer_pairs = [(nodes[f"gat.{i}.w"], nodes[f"gat.{i}.a"])
                       for i in range(cfg.gat_layers)]
        h_mean, _ = gat_forward(
            nm.gather_rows(emb, list(selection.representative_indices)),
            adjacency, layer_pairs, slope=cfg.leaky_slope,
            dropout=cfg.dropout, training=training,
            rng=_bag_rng(cfg.seed, epoch, bag_index, _STREAM_DROPOUT)
            if training else None)
        return {"h_mean": h_mean, "clu": clu, "state": state,
                "selection": selection, "adjacency": adjacency}

    def classify_bag(self, bag: BagRecord, nodes: dict[str, Node],
                     training: bool, epoch: int = 0, bag_index: int = 0,
                     centroid_node: Node | None = None) -> dict:
        out = self.forward_bag(bag, nodes, training, epoch, bag_index,
                               centroid_node)
        out["prob"] = classify(out["h_mean"], nodes["head.w1"],
                               nodes["head.b1"], nodes["head.w2"],
                               nodes["head.b2"], self.config.leaky_slope)
        return out

    def caption_prefix(self, bag: BagRecord, nodes: dict[str, Node],
                       training: bool, epoch: int = 0, bag_index: int = 0,
                       centroid_node: Node | None = None) -> dict:
        out = self.forward_bag(bag, nodes, training, epoch, bag_index,
                               centroid_node)
        out["prefix"] = project_prefix(out["h_mean"], nodes["prefix.wc"])
        return out

    def caption_param_nodes(self, nodes: dict[str, Node]) -> dict[str, Node]:
        return {k[len("cap."):]: v for k, v in nodes.items()
                if k.startswith("cap.")}

    def predict_probability(self, bag: BagRecord) -> float:
        out = self.classify_bag(bag, self.param_nodes(), training=False)
        return out["prob"].value.item()

    def generate_caption(self, bag: BagRecord, mode: str = "greedy",
                         temperature: float = 1.0,
                         rng: np.random.Generator | None = None) -> str:
        nodes = self.param_nodes()
        out = self.caption_prefix(bag, nodes, training=False)
        cap = {k: v.value for k, v in self.caption_param_nodes(nodes).items()}
        ids = generate(cap, out["prefix"].value,
                       max_len=self.config.max_caption_len, mode=mode,
                       temperature=temperature, rng=rng)
        return self.vocab.decode(ids)


class Trainer:
    """Adam training loop with per-epoch JSON-able logging."""

    def __init__(self, dataset: Dataset, config: TrainConfig,
                 model: PipelineModel | None = None):
        self.config = config
        self.bags = self._supervised_bags(dataset, config.task)
        self.d_v = dataset.d_v
        vocab = None
        if config.task == "caption":
            if model is not None and model.vocab is not None:
                vocab = model.vocab
            else:
                vocab = Vocabulary.from_texts(b.caption for b in self.bags)
        self.model = model if model is not None else PipelineModel(
            config, dataset.d_v, vocab)
        self.adam = AdamState()
        self.epoch = 0
        self.log: list[dict] = []
        self._order_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([config.seed, _STREAM_ORDER])))

    @staticmethod
    def _supervised_bags(dataset: Dataset, task: str) -> list[BagRecord]:
        kept = []
        for bag in dataset.bags:
            missing = bag.label is None if task == "classify" \
                else bag.caption is None
            if missing:
                warnings.warn(f"bag {bag.patient_id!r} lacks "
                              f"{'a label' if task == 'classify' else 'a caption'};"
                              " skipped")
            else:
                kept.append(bag)
        if not kept:
            raise ContractError(f"no bags usable for task {task!r}")
        return kept

    def _batches(self) -> list[list[int]]:
        order = self._order_rng.permutation(len(self.bags)).tolist()
        bs = self.config.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    def _forward_many(self, indices: list[int], nodes: dict[str, Node],
                      fn) -> list[dict]:
        cfg = self.config
        if cfg.jobs > 1 and len(indices) > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                futs = [pool.submit(fn, self.bags[i], nodes, True,
                                    self.epoch, i) for i in indices]
                return [f.result() for f in futs]
        return [fn(self.bags[i], nodes, True, self.epoch, i) for i in indices]

    def _train_batch(self, indices: list[int]) -> tuple[float, float, float]:
        cfg = self.config
        nodes = self.model.param_nodes()
        if cfg.task == "classify":
            outs = self._forward_many(indices, nodes, self.model.classify_bag)
            probs = nm.concat_rows([o["prob"] for o in outs])
            labels = Matrix(np.array([[float(self.bags[i].label)]
                                      for i in indices]))
            task_loss = bce_loss(probs, labels)
            clu = nm.reduce_mean(nm.concat_rows([o["clu"] for o in outs]))
            total = total_loss_classification(task_loss, clu, cfg.lambda_clu)
        else:
            outs = self._forward_many(indices, nodes, self.model.caption_prefix)
            prefixes = [o["prefix"] for o in outs]
            seqs = [self.model.vocab.encode(self.bags[i].caption)
                    for i in indices]
            task_loss = caption_nll(self.model.caption_param_nodes(nodes),
                                    prefixes, seqs, n_heads=cfg.n_heads)
            clu = nm.reduce_mean(nm.concat_rows([o["clu"] for o in outs]))
            total = total_loss_caption(task_loss, clu, cfg.lambda_clu)

        backward(total)
        grads = {name: node.grad for name, node in nodes.items()
                 if node.grad is not None}
        adam_step(self.model.params, grads, self.adam, cfg.lr,
                  cfg.weight_decay)
        self._last_outs = outs, indices
        return (task_loss.value.item(), clu.value.item(), total.value.item())

    def run_epochs(self, n: int) -> list[dict]:
        cfg = self.config
        for _ in range(n):
            task_sum = clu_sum = 0.0
            seen = 0
            probs, labels = [], []
            for batch in self._batches():
                t, c, _ = self._train_batch(batch)
                task_sum += t * len(batch)
                clu_sum += c * len(batch)
                seen += len(batch)
                if cfg.task == "classify":
                    outs, idxs = self._last_outs
                    probs.extend(o["prob"].value.item() for o in outs)
                    labels.extend(self.bags[i].label for i in idxs)
            task_mean = task_sum / seen
            clu_mean = clu_sum / seen
            entry = {
                "epoch": self.epoch,
                "task": cfg.task,
                ("bce" if cfg.task == "classify" else "cap"): task_mean,
                "clu": clu_mean,
                "total": task_mean + cfg.lambda_clu * clu_mean,
            }
            if cfg.task == "classify" and len(set(labels)) > 1:
                m = classification_metrics(probs, labels)
                entry.update(precision=m.precision, recall=m.recall,
                             f1=m.f1, auc=m.auc)
            self.log.append(entry)
            self.epoch += 1
        return self.log

    def evaluate(self, dataset: Dataset) -> EvalReport:
        return evaluate_model(self.model, dataset)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.model.params.items()},
            adam_m={k: v.copy() for k, v in self.adam.m.items()},
            adam_v={k: v.copy() for k, v in self.adam.v.items()},
            adam_t=self.adam.t,
            epoch=self.epoch,
            rng_state=self._order_rng.bit_generator.state,
            d_v=self.d_v,
            vocab_tokens=list(self.model.vocab.id_to_token)
            if self.model.vocab else None)


def train(dataset: Dataset, config: TrainConfig) -> tuple[Checkpoint, list[dict]]:
    trainer = Trainer(dataset, config)
    log = trainer.run_epochs(config.epochs)
    return trainer.checkpoint(), log


def model_from_checkpoint(ckpt: Checkpoint) -> PipelineModel:
    vocab = None
    if ckpt.vocab_tokens is not None:
        vocab = Vocabulary(ckpt.vocab_tokens[4:])
    return PipelineModel(ckpt.config, ckpt.d_v, vocab,
                         params={k: v.copy() for k, v in ckpt.params.items()})


def evaluate_model(model: PipelineModel, dataset: Dataset) -> EvalReport:
    """Eval-mode metrics: deterministic edges, no dropout, full clustering."""
    bags = Trainer._supervised_bags(dataset, model.config.task)
    if model.config.task == "classify":
        probs = [model.predict_probability(b) for b in bags]
        labels = [b.label for b in bags]
        m = classification_metrics(probs, labels)
        return EvalReport(task="classify", n_bags=len(bags), classification=m)

    candidates, references = [], []
    for bag in bags:
        candidates.append(model.generate_caption(bag).split())
        references.append(bag.caption.lower().split())
    bleus = tuple(
        float(np.mean([bleu(c, [r], n=k)
                       for c, r in zip(candidates, references)]))
        for k in range(1, 5))
    rl = float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))
    cd = cider(candidates, references)
    return EvalReport(task="caption", n_bags=len(bags), bleu=bleus,
                      rouge_l=rl, cider=cd)


def evaluate(dataset: Dataset, ckpt: Checkpoint) -> EvalReport:
    return evaluate_model(model_from_checkpoint(ckpt), dataset)


# ---------------------------------------------------------------------------
# average-pool baseline (aggregate-then-classify with a linear classifier)

def train_avgpool_baseline(dataset: Dataset, config: TrainConfig
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Logistic regression on the bag-mean embedding, trained with the same
    optimizer settings and epoch budget as the pipeline."""
    bags = Trainer._supervised_bags(dataset, "classify")
    means = np.stack([b.embeddings.data.mean(axis=0) for b in bags])
    labels = np.array([[float(b.label)] for b in bags])
    w = np.zeros((means.shape[1], 1))
    b = np.zeros((1, 1))
    adam = AdamState()
    order_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.seed, _STREAM_ORDER, 1])))
    bs = config.batch_size
    for _ in range(config.epochs):
        order = order_rng.permutation(len(bags))
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            wn, bn = parameter(Matrix(w)), parameter(Matrix(b))
            logits = nm.add(nm.matmul(Matrix(means[idx]), wn), bn)
            preds = nm.clip(nm.sigmoid(logits), 1e-7, 1 - 1e-7)
            loss = bce_loss(preds, Matrix(labels[idx]))
            backward(loss)
            adam_step({"w": w, "b": b}, {"w": wn.grad, "b": bn.grad},
                      adam, config.lr, config.weight_decay)
    return w, b


def avgpool_baseline_scores(dataset: Dataset, w: np.ndarray,
                            b: np.ndarray) -> tuple[list[float], list[int]]:
    bags = Trainer._supervised_bags(dataset, "classify")
    means = np.stack([bag.embeddings.data.mean(axis=0) for bag in bags])
    logits = means @ w + b
    probs = 1.0 / (1.0 + np.exp(-logits))
    return probs.ravel().tolist(), [bag.label for bag in bags]


# ---------------------------------------------------------------------------
# checkpoint serialization (documented flat binary of named tensors)

def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    enc = name.encode("utf-8")
    return (struct.pack("<H", len(enc)) + enc
            + struct.pack("<II", arr.shape[0], arr.shape[1])
            + arr.astype("<f8").tobytes(order="C"))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    config_json = json.dumps(asdict(ckpt.config), sort_keys=True).encode()
    meta = {"epoch": ckpt.epoch, "adam_t": ckpt.adam_t,
            "rng_state": ckpt.rng_state, "d_v": ckpt.d_v,
            "vocab_tokens": ckpt.vocab_tokens}
    meta_json = json.dumps(meta, sort_keys=True).encode()
    tensors: list[tuple[str, np.ndarray]] = []
    for name in sorted(ckpt.params):
        tensors.append((f"param.{name}", ckpt.params[name]))
    for name in sorted(ckpt.adam_m):
        tensors.append((f"adam.m.{name}", ckpt.adam_m[name]))
    for name in sorted(ckpt.adam_v):
        tensors.append((f"adam.v.{name}", ckpt.adam_v[name]))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_json)))
        fh.write(config_json)
        fh.write(struct.pack("<I", len(meta_json)))
        fh.write(meta_json)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            fh.write(_pack_tensor(name, arr))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: checkpoint version {version} unsupported")
    off = 6
    (clen,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = TrainConfig.from_dict(json.loads(raw[off:off + clen]))
    off += clen
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        size = rows * cols * 8
        arr = np.frombuffer(raw, dtype="<f8", count=rows * cols,
                            offset=off).reshape(rows, cols).copy()
        off += size
        if name.startswith("param."):
            params[name[6:]] = arr
        elif name.startswith("adam.m."):
            adam_m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[7:]] = arr
        else:
            raise ContractError(f"{path}: unknown tensor kind {name!r}")
    return Checkpoint(config=config, params=params, adam_m=adam_m,
                      adam_v=adam_v, adam_t=meta["adam_t"],
                      epoch=meta["epoch"], rng_state=meta["rng_state"],
                      d_v=meta["d_v"], vocab_tokens=meta["vocab_tokens"])
