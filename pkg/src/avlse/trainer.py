"""Joint training of the predictive denoiser and the score model, with optional CMKT losses."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import ntf
from . import signal as sig
from .cmkt import CMKT, MHCA, OT, CmktConfig, total_loss
from .corpus import LoadedRecord, load_manifest, load_record, split_entries
from .model import Denoiser, NetworkConfig, ScoreModel
from .numerics import AdamState, EmaState, adam_step, backward, ema_update
from .sde import OUVESDE, SdeConfig

log = logging.getLogger(__name__)

VARIANTS = ("A", "A+V", "A+V+L-MHCA", "A+V+L-OT")
CKPT_MAGIC = b"DLAVSE01"
CKPT_VERSION = 1
LOG_FIELDS = ["step", "loss_denoiser", "loss_score", "loss_align", "loss_opt", "total"]
# puts clean speech bins near unit-order power (about 0.1 on the synthetic corpus),
# well above the sigma(t_min)^2 floor of the diffusion
DEFAULT_SPEC_SCALE = 4.6


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "A+V"
    epochs: int = 1
    max_steps: Optional[int] = None
    batch_size: int = 1
    seed: int = 0
    learning_rate: float = 1e-4
    ema_decay: float = 0.999
    checkpoint_interval: int = 0
    crop_frames: int = 256
    hop: int = 128
    spec_scale: float = DEFAULT_SPEC_SCALE
    dtype: str = "float64"
    detect_anomaly: bool = False
    sde: SdeConfig = field(default_factory=SdeConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    cmkt: CmktConfig = field(default_factory=CmktConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.variant.startswith("A+V+L"):
            want = MHCA if self.variant.endswith("MHCA") else OT
            if self.cmkt.variant != want:
                self.cmkt = CmktConfig(**{**asdict(self.cmkt), "variant": want, "align_weight": None})

    @property
    def uses_visual(self) -> bool:
        return self.variant != "A"

    @property
    def cmkt_variant(self) -> Optional[str]:
        if not self.variant.startswith("A+V+L"):
            return None
        return self.cmkt.variant

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(**{**asdict(self.network), "use_visual": self.uses_visual, "hop": self.hop})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        for key, typ in (("sde", SdeConfig), ("network", NetworkConfig), ("cmkt", CmktConfig)):
            if key in d and not is_dataclass(d[key]):
                d[key] = typ(**d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Example:
    id: str
    clean: torch.Tensor
    noisy: torch.Tensor
    visual: torch.Tensor
    linguistic: torch.Tensor
    token_ids: torch.Tensor
    token_times: np.ndarray


def make_example(rec: LoadedRecord, cfg: TrainConfig) -> Example:
    stft_cfg = sig.StftConfig(hop=cfg.hop)
    cdt = torch.complex64 if cfg.dtype == "float32" else torch.complex128
    to_spec = lambda w: torch.from_numpy(sig.stft(w, stft_cfg) / cfg.spec_scale).to(cdt)  # noqa: E731
    return Example(
        rec.id,
        to_spec(rec.clean),
        to_spec(rec.noisy),
        torch.from_numpy(rec.visual).to(cfg.torch_dtype),
        torch.from_numpy(rec.linguistic).to(cfg.torch_dtype),
        torch.from_numpy(rec.token_ids),
        rec.token_times,
    )


def spectral_mse_loss(estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all real and imaginary entries."""
    if estimate.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(estimate.shape)} vs {tuple(target.shape)}")
    d = torch.view_as_real(estimate - target)
    return (d**2).mean()


denoiser_loss = spectral_mse_loss


def score_residual_loss(score: torch.Tensor, phi: torch.Tensor, sigma: float) -> torch.Tensor:
    """|s + phi/sigma|^2 averaged over real elements."""
    return spectral_mse_loss(score, -phi / sigma)


def score_loss(model, x0, y_hat, v, t: float, phi, sde: OUVESDE, v_seconds=None) -> torch.Tensor:
    if t < sde.config.t_min:
        raise ValueError(f"t={t} below t_min")
    sigma = sde.std(t)
    x_t = sde.mean(x0, y_hat, t) + sigma * phi
    return score_residual_loss(model(x_t, y_hat, t, v, v_seconds), phi, sigma)


class TrainState:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.sde = OUVESDE(cfg.sde)
        ncfg = cfg.network_config()
        torch.manual_seed(cfg.seed)
        self.denoiser = Denoiser(ncfg).to(cfg.torch_dtype)
        self.score = ScoreModel(ncfg, self.sde).to(cfg.torch_dtype)
        self.cmkt: Optional[CMKT] = None
        if cfg.cmkt_variant is not None:
            # separate stream so the audio-visual networks initialise identically with or without CMKT
            torch.manual_seed(cfg.seed + 1_000_003)
            self.cmkt = CMKT(cfg.cmkt, ncfg.base_width).to(cfg.torch_dtype)
            self.score.net.bottleneck_hook = self.cmkt.hook
        self.generator = torch.Generator().manual_seed(cfg.seed + 2)
        self.adam = AdamState(learning_rate=cfg.learning_rate)
        self.ema = EmaState.from_params(self.parameters(), cfg.ema_decay)
        self.step = 0
        self.epoch = 0
        self.position = 0
        self.log: List[dict] = []

    def modules(self) -> Dict[str, torch.nn.Module]:
        mods = {"denoiser": self.denoiser, "score": self.score}
        if self.cmkt is not None:
            mods["cmkt"] = self.cmkt
        return mods

    def parameters(self) -> Dict[str, torch.nn.Parameter]:
        return {f"{k}.{n}": p for k, m in self.modules().items() for n, p in m.named_parameters()}


def _crop(ex: Example, cfg: TrainConfig, gen: torch.Generator):
    T = ex.clean.shape[-1]
    L = cfg.crop_frames
    hi = max(T - L, 0)
    offset = int(torch.randint(0, hi + 1, (), generator=gen).item())
    clean = sig.crop_or_pad(ex.clean, L, offset)
    noisy = sig.crop_or_pad(ex.noisy, L, offset)
    frame_s = cfg.hop / sig.SAMPLE_RATE
    start, stop = offset * frame_s, (offset + L) * frame_s
    centers = (np.arange(ex.visual.shape[0]) + 0.5) / 25.0
    keep = np.nonzero((centers >= start - 0.1) & (centers <= stop + 0.1))[0]
    if keep.size == 0:
        keep = np.array([int(np.argmin(np.abs(centers - start)))])
    visual = ex.visual[keep]
    v_sec = torch.from_numpy(centers[keep] - start).to(ex.visual.dtype)
    on, off = ex.token_times[:, 0], ex.token_times[:, 1]
    tok = np.nonzero((off > start) & (on < stop))[0] + 1
    rows = np.concatenate([[0], tok, [ex.linguistic.shape[0] - 1]])
    return clean, noisy, visual, v_sec, ex.linguistic[rows], ex.token_ids[rows]


def example_losses(state: TrainState, ex: Example, gen: torch.Generator):
    """(l_den, l_score, l_align, l_opt) on one random crop, drawing crop, t and noise from ``gen``."""
    cfg = state.cfg
    sde = state.sde
    clean, noisy, visual, v_sec, Z, ids = _crop(ex, cfg, gen)
    v = visual if cfg.uses_visual else None
    vs = v_sec if cfg.uses_visual else None
    y_hat = state.denoiser(noisy, v, vs)
    l_den = denoiser_loss(y_hat, clean)
    t = sde.sample_time(gen)
    pert = sde.sample_perturbed(clean, y_hat.detach(), t, gen)
    sigma = sde.std(t)
    s = state.score(pert.x_t.to(clean.dtype), y_hat.detach(), t, v, vs)
    l_score = score_residual_loss(s, pert.phi.to(s.dtype), sigma)
    if cfg.cmkt_variant is not None:
        l_align, l_opt, _ = state.cmkt.losses(Z, ids)
    else:
        l_align = l_opt = torch.zeros((), dtype=l_den.dtype)
    return l_den, l_score, l_align, l_opt


def probe_losses(state: TrainState, examples: List[Example], seed: int = 0) -> dict:
    """Mean losses over fixed crops of ``examples`` with the current raw weights.

    Crops, t and noise come from ``seed`` alone, so two states can be compared on identical inputs.
    The training generator is left untouched.
    """
    gen = torch.Generator().manual_seed(seed)
    acc = {k: 0.0 for k in LOG_FIELDS[1:5]}
    with torch.no_grad():
        for ex in examples:
            vals = example_losses(state, ex, gen)
            for k, val in zip(acc, vals):
                acc[k] += float(val) / len(examples)
    return acc


def train_step(state: TrainState, batch: List[Example]) -> dict:
    cfg = state.cfg
    gen = state.generator
    variant = cfg.cmkt_variant
    acc = {k: 0.0 for k in LOG_FIELDS[1:]}
    for ex in batch:
        l_den, l_score, l_align, l_opt = example_losses(state, ex, gen)
        parts = {"denoiser": l_den.item(), "score": l_score.item(), "align": l_align.item(), "opt": l_opt.item()}
        try:
            total = total_loss(variant, l_den, l_score, l_align, l_opt, cfg.cmkt)
        except ValueError as err:
            raise TrainingError(f"step {state.step}: {err}; components {parts}") from err
        if not math.isfinite(total.item()):
            raise TrainingError(f"step {state.step}: non-finite total loss; components {parts}")
        backward(total / len(batch), check_nan=cfg.detect_anomaly)
        acc["loss_denoiser"] += parts["denoiser"] / len(batch)
        acc["loss_score"] += parts["score"] / len(batch)
        acc["loss_align"] += parts["align"] / len(batch)
        acc["loss_opt"] += parts["opt"] / len(batch)
        acc["total"] += total.item() / len(batch)
    params = state.parameters()
    adam_step(params, state.adam)
    ema_update(state.ema, params)
    state.step += 1
    row = {"step": state.step, **acc}
    state.log.append(row)
    return row


def epoch_order(seed: int, epoch: int, n: int) -> List[int]:
    g = torch.Generator().manual_seed(seed * 1000 + epoch + 17)
    return torch.randperm(n, generator=g).tolist()


def total_steps(cfg: TrainConfig, n_train: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * math.ceil(n_train / cfg.batch_size)


def run_training(state: TrainState, examples: List[Example], n_steps: Optional[int] = None, callback=None) -> TrainState:
    """Advance ``state`` until it has taken ``n_steps`` optimizer steps in total."""
    cfg = state.cfg
    target = total_steps(cfg, len(examples)) if n_steps is None else n_steps
    per_epoch = math.ceil(len(examples) / cfg.batch_size)
    while state.step < target:
        order = epoch_order(cfg.seed, state.epoch, len(examples))
        b = state.position
        batch = [examples[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
        row = train_step(state, batch)
        state.position += 1
        if state.position >= per_epoch:
            state.position = 0
            state.epoch += 1
        if callback is not None:
            callback(state, row)
    return state


# checkpoints ---------------------------------------------------------------


def _tensor_payload(state: TrainState) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {}
    for name, p in state.parameters().items():
        tensors[name] = p.detach().numpy()
    for name, s in state.ema.shadow.items():
        tensors[f"ema.{name}"] = s.numpy()
    for name, m in state.adam.first_moment.items():
        tensors[f"adam.m.{name}"] = m.numpy()
    for name, v in state.adam.second_moment.items():
        tensors[f"adam.v.{name}"] = v.numpy()
    tensors["rng.torch"] = state.generator.get_state().numpy()
    return tensors


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors = _tensor_payload(state)
    meta = {
        "format_version": CKPT_VERSION,
        "config": state.cfg.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "position": state.position,
        "adam": {"step_count": state.adam.step_count, "learning_rate": state.adam.learning_rate,
                 "beta1": state.adam.beta1, "beta2": state.adam.beta2, "epsilon": state.adam.epsilon},
        "ema_decay": state.ema.decay,
        "log": state.log,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQQ", CKPT_VERSION, len(tensors), len(blob)))
    ntf.write_records(buf, tensors, tagged=True)
    buf.write(blob)
    return buf.getvalue()


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    data = Path(path).read_bytes()
    f = io.BytesIO(data)
    if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    head = f.read(struct.calcsize("<IQQ"))
    if len(head) != struct.calcsize("<IQQ"):
        raise CheckpointError(f"{path}: truncated header")
    version, count, blob_len = struct.unpack("<IQQ", head)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        tensors = ntf.read_records(f, count, tagged=True)
    except ntf.FormatError as err:
        raise CheckpointError(f"{path}: {err}") from err
    blob = f.read(blob_len)
    if len(blob) != blob_len:
        raise CheckpointError(f"{path}: truncated config block")
    if f.read(1):
        raise CheckpointError(f"{path}: trailing bytes")
    return tensors, json.loads(blob.decode("utf-8"))


def load_checkpoint(path) -> TrainState:
    tensors, meta = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    state = TrainState(cfg)
    params = state.parameters()
    expected = set(params) | {f"ema.{k}" for k in params} | {"rng.torch"}
    if meta["adam"]["step_count"] > 0:
        expected |= {f"adam.m.{k}" for k in params} | {f"adam.v.{k}" for k in params}
    unknown = set(tensors) - expected
    missing = expected - set(tensors)
    if unknown:
        raise CheckpointError(f"{path}: unknown tensor names {sorted(unknown)[:5]}")
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")

    def as_t(name, like):
        arr = tensors[name]
        if tuple(arr.shape) != tuple(like.shape):
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tuple(like.shape)}")
        return torch.from_numpy(arr.copy()).to(like.dtype)

    with torch.no_grad():
        for name, p in params.items():
            p.copy_(as_t(name, p))
            state.ema.shadow[name] = as_t(f"ema.{name}", p)
            if meta["adam"]["step_count"] > 0:
                state.adam.first_moment[name] = as_t(f"adam.m.{name}", p)
                state.adam.second_moment[name] = as_t(f"adam.v.{name}", p)
    a = meta["adam"]
    state.adam.step_count = a["step_count"]
    state.adam.learning_rate = a["learning_rate"]
    state.adam.beta1, state.adam.beta2, state.adam.epsilon = a["beta1"], a["beta2"], a["epsilon"]
    state.ema.decay = meta["ema_decay"]
    state.generator.set_state(torch.from_numpy(tensors["rng.torch"].copy()))
    state.step, state.epoch, state.position = meta["step"], meta["epoch"], meta["position"]
    state.log = meta["log"]
    return state


@dataclass
class InferenceModels:
    variant: str
    denoiser: Denoiser
    score: ScoreModel
    sde: OUVESDE
    stft: sig.StftConfig
    spec_scale: float
    real_dtype: torch.dtype

    def to_model_units(self, spec: np.ndarray) -> torch.Tensor:
        cdt = torch.complex64 if self.real_dtype == torch.float32 else torch.complex128
        return torch.from_numpy(spec / self.spec_scale).to(cdt)

    def from_model_units(self, spec: torch.Tensor) -> np.ndarray:
        return spec.detach().to(torch.complex128).numpy() * self.spec_scale


def inference_models(state: TrainState, use_ema: bool = True) -> InferenceModels:
    """Copies of both networks carrying the EMA weights, without any CMKT hook."""
    cfg = state.cfg
    ncfg = cfg.network_config()
    den = Denoiser(ncfg).to(cfg.torch_dtype)
    sc = ScoreModel(ncfg, state.sde).to(cfg.torch_dtype)
    src = state.ema.shadow if use_ema else {k: p.detach() for k, p in state.parameters().items()}
    with torch.no_grad():
        for prefix, mod in (("denoiser", den), ("score", sc)):
            for n, p in mod.named_parameters():
                p.copy_(src[f"{prefix}.{n}"])
    den.eval()
    sc.eval()
    return InferenceModels(cfg.variant, den, sc, state.sde, sig.StftConfig(hop=cfg.hop), cfg.spec_scale, cfg.torch_dtype)


def load_inference(path, variant: Optional[str] = None) -> InferenceModels:
    tensors, meta = read_checkpoint(path)
    ckpt_variant = meta["config"]["variant"]
    if variant is not None and variant != ckpt_variant:
        raise CheckpointError(
            f"{path} holds a {ckpt_variant!r} model but {variant!r} was requested; "
            "retrain or pass the matching variant"
        )
    return inference_models(load_checkpoint(path))


# driver ---------------------------------------------------------------------


def load_examples(data_dir, split: str, cfg: TrainConfig) -> List[Example]:
    manifest = load_manifest(data_dir)
    return [make_example(load_record(data_dir, e), cfg) for e in split_entries(manifest, split)]


def write_log_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "step" else r[k]) for k in LOG_FIELDS})


def train(cfg: TrainConfig, data_dir, out_dir, resume=None, examples: Optional[List[Example]] = None, figures: bool = True) -> TrainState:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(max(torch.get_num_threads(), 1))
    if resume is not None:
        state = load_checkpoint(resume)
        cfg = state.cfg
    else:
        state = TrainState(cfg)
    if examples is None:
        examples = load_examples(data_dir, "train", cfg)

    def on_step(st, row):
        if st.step % 50 == 0:
            log.info("step %d total %.4f den %.4f score %.4f align %.4f", st.step, row["total"], row["loss_denoiser"], row["loss_score"], row["loss_align"])
        if cfg.checkpoint_interval and st.step % cfg.checkpoint_interval == 0:
            save_checkpoint(st, out / f"step_{st.step:06d}.ckpt")

    run_training(state, examples, callback=on_step)
    save_checkpoint(state, out / "final.ckpt")
    write_log_csv(state.log, out / "train_log.csv")
    if figures:
        from .plotting import plot_training_log

        plot_training_log(state.log, out / "train_log.png", title=cfg.variant)
    return state
