"""Episodic training, frozen-bank evaluation and checkpoint files."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .data import Episode, SplitDataset, sample_episode
from .ikt import IktParams, KnowledgeBank, aggregate, construct_prototypes, retrieve
from .interframe import TemporalEncoderParams, temporal_encode
from .isc import IscParams, MaskStrategy, build_mask, inter_video_correlate
from .metrics import METRICS, class_prototypes, cross_entropy, episode_logits
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HRGC"
CHECKPOINT_VERSION = 1
MODULE_ORDERS = ("isc_ikt", "ikt_isc")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    N: int = 5
    K: int = 1
    L: int = 5
    T: int = 8
    C: int = 32
    epochs: int = 10
    episodes_per_epoch: int = 200
    learning_rate: float = 1e-3
    lr_milestones: list = field(default_factory=lambda: [6])
    lr_decay: float = 0.1
    seed: int = 42
    mask_strategy: str = "adaptive"
    metric: str = "otam"
    kappa: float = 0.7
    M: int = 3
    G: int = 50
    mu: float = 0.99
    gamma: float = 0.1
    tau: float = 0.1
    module_order: str = "isc_ikt"
    disable_isc: bool = False
    disable_ikt: bool = False
    retrieval_weighting: str = "softmax"
    frame_layers: int = 1
    frame_heads: int = 2
    isc_heads: int = 2
    ikt_heads: int = 2
    pos_scale: float = 0.1

    def validate(self) -> "TrainConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        for name in ("N", "K", "T", "C", "epochs", "episodes_per_epoch", "M", "G", "frame_heads",
                     "isc_heads", "ikt_heads"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 1, f"{name} must be a positive integer")
        need(isinstance(self.L, int) and self.L >= 1, "L must be a positive integer")
        need(isinstance(self.frame_layers, int) and self.frame_layers >= 0, "frame_layers must be >= 0")
        need(self.T >= 1 and self.C >= 2, "need T >= 1 and C >= 2")
        for heads in ("frame_heads", "isc_heads", "ikt_heads"):
            need(self.C % getattr(self, heads) == 0, f"C must be divisible by {heads}")
        need(self.learning_rate >= 0, "learning_rate must be >= 0")
        need(0 < self.lr_decay <= 1, "lr_decay must lie in (0, 1]")
        need(all(isinstance(m, int) and m >= 0 for m in self.lr_milestones), "lr_milestones must be epoch indices")
        need(self.mask_strategy in {m.value for m in MaskStrategy}, f"unknown mask_strategy {self.mask_strategy!r}")
        need(self.metric in METRICS, f"unknown metric {self.metric!r}")
        need(0 < self.kappa <= 1, "kappa must lie in (0, 1]")
        need(0 <= self.mu <= 1, "mu must lie in [0, 1]")
        need(self.gamma >= 0, "gamma must be >= 0")
        need(self.tau > 0, "tau must be > 0")
        need(self.module_order in MODULE_ORDERS, f"module_order must be one of {MODULE_ORDERS}")
        need(self.retrieval_weighting in ("softmax", "uniform"), "retrieval_weighting must be softmax or uniform")
        need(self.pos_scale >= 0, "pos_scale must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        for f in dataclasses.fields(cls):
            v = getattr(cfg, f.name)
            if f.type == "float" and isinstance(v, int) and not isinstance(v, bool):
                setattr(cfg, f.name, float(v))
        return cfg.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw).validate()


class Model:
    """All learnable tensors plus the knowledge bank."""

    def __init__(self, config: TrainConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 0])
        C = config.C
        # every block is initialised so seeds give identical shared weights across ablations
        self.frame = TemporalEncoderParams.init(rng, C, config.frame_layers, config.frame_heads,
                                                pos_scale=config.pos_scale)
        self.isc = IscParams.init(rng, C, config.isc_heads)
        self.ikt = IktParams.init(rng, C, config.M, config.ikt_heads)
        self.bank = KnowledgeBank(config.G, C, config.mu)

    @property
    def use_isc(self) -> bool:
        return not self.config.disable_isc

    @property
    def use_ikt(self) -> bool:
        return not self.config.disable_ikt

    def parameters(self) -> dict:
        params = dict(self.frame.named())
        if self.use_isc:
            params.update(self.isc.named())
        if self.use_ikt:
            params.update(self.ikt.named())
        return params

    def all_parameters(self) -> dict:
        return {**self.frame.named(), **self.isc.named(), **self.ikt.named()}

    def zero_grad(self) -> None:
        for p in self.all_parameters().values():
            p.grad = None

    def load_arrays(self, arrays: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def state_digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        h.update(self.bank.digest().encode())
        return h.hexdigest()


def forward_episode(episode: Episode, model: Model, config: TrainConfig | None = None):
    """Run one episode through the pipeline; returns ``(logits, intermediates)``."""
    cfg = config or model.config
    N, K = episode.way, episode.shot
    ns = N * K
    x = Tensor(np.concatenate([episode.support_array(), episode.query_array()]))
    f = temporal_encode(x, model.frame)
    f_s, f_q = f[:ns], f[ns:]
    inter = {"F_s": f_s, "F_q": f_q}
    mask = build_mask(cfg.mask_strategy, N, K, len(episode.query))

    def run_isc(fs, fq):
        fs, fq, w = inter_video_correlate(fs, fq, mask, model.isc, return_weights=True)
        inter["isc_weights"] = w
        return fs, fq

    def run_ikt(fs):
        p_hat = construct_prototypes(model.ikt.prototypes, fs, model.ikt)
        p_prime = retrieve(p_hat, model.bank, cfg.kappa, cfg.retrieval_weighting)
        inter["p_hat"], inter["p_prime"] = p_hat, p_prime
        return aggregate(fs, p_hat, p_prime, model.ikt)

    if cfg.module_order == "isc_ikt":
        if model.use_isc:
            f_s, f_q = run_isc(f_s, f_q)
        inter["F_tilde_s"], inter["F_tilde_q"] = f_s, f_q
        if model.use_ikt:
            f_s = run_ikt(f_s)
    else:
        if model.use_ikt:
            f_s = run_ikt(f_s)
        if model.use_isc:
            f_s, f_q = run_isc(f_s, f_q)
    inter["F_bar_s"], inter["F_bar_q"] = f_s, f_q
    protos = class_prototypes(f_s, N, K)
    logits = episode_logits(f_q, protos, cfg.metric, cfg.gamma, cfg.tau)
    return logits, inter


def episode_loss(episode: Episode, model: Model):
    logits, inter = forward_episode(episode, model)
    return cross_entropy(logits, episode.query_labels), logits, inter


class Adam:
    """Bias-corrected adaptive moment estimation."""

    def __init__(self, names, shapes: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros(shapes[n]) for n in names}
        self.v = {n: np.zeros(shapes[n]) for n in names}

    def step(self, params: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            step = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - step


def learning_rate(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.learning_rate * config.lr_decay ** drops


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    bank: KnowledgeBank | None
    rng_state: dict
    step: int = 0
    adam_t: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    dataset: dict | None = None

    def build_model(self) -> Model:
        model = Model(self.config)
        model.load_arrays(self.params)
        if self.bank is not None:
            model.bank = self.bank_copy()
        return model

    def bank_copy(self) -> KnowledgeBank:
        bank, _ = KnowledgeBank.from_bytes(self.bank.to_bytes(), self.config.C)
        return bank

    def to_bytes(self) -> bytes:
        meta = {"config": self.config.to_dict(), "step": self.step, "adam_t": self.adam_t,
                "dataset": self.dataset}
        blob = json.dumps(meta, sort_keys=True).encode()
        out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
        tensors = dict(sorted(self.params.items()))
        tensors.update({f"adam.m.{k}": v for k, v in sorted(self.adam_m.items())})
        tensors.update({f"adam.v.{k}": v for k, v in sorted(self.adam_v.items())})
        out.append(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            key = name.encode()
            arr = np.asarray(arr, dtype="<f8")
            out.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
        if self.bank is None:
            out.append(struct.pack("<B", 0))
        else:
            out.append(struct.pack("<B", 1) + self.bank.to_bytes())
        rng_blob = json.dumps(self.rng_state, sort_keys=True).encode()
        out.append(struct.pack("<I", len(rng_blob)) + rng_blob)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, n = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(raw[pos:pos + n])
        pos += n
        config = TrainConfig.from_dict(meta["config"])
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + klen].decode()
            pos += klen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            tensors[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(shape).copy()
            pos += size
        (has_bank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        bank = None
        if has_bank:
            bank, used = KnowledgeBank.from_bytes(raw[pos:], config.C)
            pos += used
        (rlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        rng_state = json.loads(raw[pos:pos + rlen])
        params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
        m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
        return cls(config, params, bank, rng_state, meta["step"], meta["adam_t"], m, v, meta.get("dataset"))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _snapshot(model: Model, rng, step: int, opt: Adam) -> Checkpoint:
    params = {k: p.data.copy() for k, p in model.parameters().items()}
    bank, _ = KnowledgeBank.from_bytes(model.bank.to_bytes(), model.config.C)
    return Checkpoint(model.config, params, bank, rng.bit_generator.state, step, opt.t,
                      {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()})


def train(config: TrainConfig, dataset: SplitDataset, resume: Checkpoint | None = None,
          max_steps: int | None = None, on_step=None) -> Checkpoint:
    """Train episodically; ``on_step(record)`` receives one dict per optimizer step."""
    config.validate()
    if not dataset.splits["train"]:
        raise TrainingError("train split is empty")
    if (dataset.T, dataset.C) != (config.T, config.C):
        raise TrainingError(f"dataset has T={dataset.T}, C={dataset.C}; config expects T={config.T}, C={config.C}")
    model = Model(config)
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    opt = Adam(params, {k: p.shape for k, p in params.items()})
    step = 0
    if resume is not None:
        model.load_arrays(resume.params)
        model.bank = resume.bank_copy()
        rng.bit_generator.state = resume.rng_state
        step = resume.step
        opt.t = resume.adam_t
        opt.m = {k: v.copy() for k, v in resume.adam_m.items()}
        opt.v = {k: v.copy() for k, v in resume.adam_v.items()}
    model.bank.unfreeze()
    total = config.epochs * config.episodes_per_epoch
    while step < total:
        if max_steps is not None and step >= max_steps:
            break
        epoch = step // config.episodes_per_epoch
        lr = learning_rate(config, epoch)
        episode = sample_episode(dataset, "train", config.N, config.K, config.L, rng)
        model.zero_grad()
        loss, logits, inter = episode_loss(episode, model)
        if not np.isfinite(loss.item()):
            ids = [s.video_id for s in episode.support + episode.query]
            raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}); episode videos: {ids}")
        loss.backward()
        opt.step(params, lr)
        if model.use_ikt:
            model.bank.update(inter["p_hat"].data)
        step += 1
        if on_step is not None:
            on_step({"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr})
    return _snapshot(model, rng, step, opt)


@dataclass
class EvalReport:
    mean: float
    ci95: float
    num_tasks: int
    per_task: list
    config: dict
    split: str
    seed: int
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True)


def _episode_accuracy(model: Model, episode: Episode) -> float:
    with tn.no_grad():
        logits, _ = forward_episode(episode, model)
    pred = np.argmax(logits.data, axis=1)
    return float(np.mean(pred == episode.query_labels))


def evaluate(checkpoint: Checkpoint, dataset: SplitDataset, split: str = "test", num_tasks: int = 2000,
             seed: int = 0, threads: int | None = None, model: Model | None = None) -> EvalReport:
    """Mean query accuracy over ``num_tasks`` episodes with every state frozen."""
    start = time.perf_counter()
    cfg = checkpoint.config
    model = model or checkpoint.build_model()
    model.bank.freeze()
    before = model.state_digest()
    rng = np.random.default_rng(seed)
    episodes = [sample_episode(dataset, split, cfg.N, cfg.K, cfg.L, rng) for _ in range(num_tasks)]
    threads = threads or int(os.environ.get("HRG_THREADS", "1") or 1)
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(threads) as pool:
            accs = list(pool.map(lambda ep: _episode_accuracy(model, ep), episodes))
    else:
        accs = [_episode_accuracy(model, ep) for ep in episodes]
    if model.state_digest() != before:
        raise TrainingError("evaluation mutated model or bank state")
    accs_arr = np.asarray(accs)
    ci = 1.96 * float(accs_arr.std()) / math.sqrt(num_tasks) if num_tasks else 0.0
    return EvalReport(float(accs_arr.mean()) if num_tasks else 0.0, ci, num_tasks, accs,
                      cfg.to_dict(), split, seed, time.perf_counter() - start)
