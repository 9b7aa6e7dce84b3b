"""Training loops, attack generation, and binary checkpoints.

Both stages share the same skeleton: embed targets, decode noise, compose
adversarial images, backprop into the decoder only. All stochastic choices
(batch order, shuffles, unrelated-image draws) come from generators seeded by
(config seed, stream tag, step), so a checkpoint at step t plus the config is
enough to reproduce the rest of the trajectory exactly.
"""

import hashlib
import json
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .augment import k_augment, sample_unrelated
from .config import TrainConfig, build_encoder
from .decoder import NoiseDecoder, compose_adversarial, decode
from .encoders import encode
from .errors import CheckpointError, ConfigError, DimensionError, TrainingDivergedError
from .objectives import (LossValue, TemperatureSchedule, contrastive_loss, ensemble_loss,
                         temperature)

# rng stream tags: keep independent choices on independent streams
_EPOCH_STREAM = 1
_SHUFFLE_STREAM = 2
_UNRELATED_STREAM = 3

CKPT_MAGIC = b"AGCK\x01\x00"


def lr_at(t: int, total: int, lr0: float, floor: float) -> float:
    """Cosine annealing from lr0 at step 0 to the floor at the last step."""
    floor = min(floor, lr0)
    if total <= 1:
        return lr0
    return floor + 0.5 * (lr0 - floor) * (1.0 + math.cos(math.pi * t / (total - 1)))


def make_optimizer(decoder: NoiseDecoder, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(decoder.parameters(), lr=config.learning_rate,
                             weight_decay=config.weight_decay)


def pretrain_step(decoder, encoder, images, config: TrainConfig, t: int,
                  optimizer) -> LossValue:
    """One pre-training update: K loss evaluations, one optimizer step.

    The scheduled contrastive loss is evaluated on each of the K shuffled
    mini-batches; gradients accumulate (divided by K so step size is
    K-invariant) and a single update is applied. Returns the mean loss.
    """
    sched = TemperatureSchedule(config.tau0, config.tau_final, config.tau_horizon)
    tau = temperature(sched, t)
    cur_lr = lr_at(t, config.steps, config.learning_rate, config.lr_floor)
    for grp in optimizer.param_groups:
        grp["lr"] = cur_lr
    with torch.no_grad():
        z = encode(encoder, images)
    delta = decode(decoder, z)
    aug = k_augment(delta, images, config.k, rng_seed=[config.seed, _SHUFFLE_STREAM, t],
                    derange=config.derange)
    optimizer.zero_grad(set_to_none=True)
    terms = None
    for j, (noise, shuffled) in enumerate(aug.mini_batches):
        adv = compose_adversarial(noise, shuffled)
        z_adv = encode(encoder, adv)
        lv = contrastive_loss(z, z_adv, tau)
        (lv.value / config.k).backward(retain_graph=j < config.k - 1)
        detached = lv.per_sample_terms.detach()
        terms = detached / config.k if terms is None else terms + detached / config.k
    optimizer.step()
    # mean over samples of the K-averaged terms equals the mean of the K losses
    return LossValue(terms.mean(), images.shape[0], terms)


class _RunLog:
    """Append-only delimited loss log: step, lr, tau, loss."""

    def __init__(self, path: Optional[Path]):
        self.path = path
        if path is not None and not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("step,lr,tau,loss\n")

    def append(self, t, lr, tau, loss):
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(f"{t},{lr!r},{tau!r},{loss!r}\n")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _EPOCH_STREAM, epoch]).permutation(n)


def _check_finite(loss: float, t: int):
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss} at step {t}; aborting")


def pretrain(config: TrainConfig, dataset, out_dir=None, init: "Checkpoint" = None,
             encoder=None, log_every: int = 100) -> "Checkpoint":
    """Pre-train the decoder over shuffled epochs of the dataset.

    Resumes from ``init`` when its fingerprint matches the config; emits
    periodic checkpoints and an append-only loss log when out_dir is given.
    """
    if config.stage != "pretrain":
        raise ConfigError(f"pretrain called with stage={config.stage!r}")
    encoder = encoder if encoder is not None else build_encoder(config.encoder)
    h, w, _ = encoder.input_shape
    per_epoch = len(dataset) // config.batch_size
    if per_epoch == 0:
        raise ConfigError(f"dataset of {len(dataset)} images is smaller than "
                          f"batch_size={config.batch_size}")
    decoder = NoiseDecoder(embed_dim=encoder.embed_dim, output_shape=(h, w, 3),
                           epsilon=config.epsilon, width=config.decoder_width,
                           seed=config.seed)
    optimizer = make_optimizer(decoder, config)
    start_step = 0
    if init is not None:
        _check_decoder_compat(init, decoder)
        if init.fingerprint == config.fingerprint:
            start_step = init.step
            _load_decoder_state(decoder, init)
            _load_optimizer_state(optimizer, decoder, init)
        else:
            _load_decoder_state(decoder, init)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = _RunLog(out_dir / "loss_log.csv" if out_dir is not None else None)
    sched = TemperatureSchedule(config.tau0, config.tau_final, config.tau_horizon)
    t0 = time.time()
    order = None
    cur_epoch = -1
    for t in range(start_step, config.steps):
        epoch, pos = divmod(t, per_epoch)
        if epoch != cur_epoch:
            order = _epoch_order(config.seed, epoch, len(dataset))
            cur_epoch = epoch
        idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
        images = dataset.load(idx.tolist())
        lv = pretrain_step(decoder, encoder, images, config, t, optimizer)
        loss = float(lv.value)
        _check_finite(loss, t)
        log.append(t, lr_at(t, config.steps, config.learning_rate, config.lr_floor),
                   temperature(sched, t), loss)
        if log_every and (t % log_every == 0 or t == config.steps - 1):
            print(f"[pretrain] step {t + 1}/{config.steps} loss {loss:.4f} "
                  f"tau {temperature(sched, t):.3f} ({time.time() - t0:.0f}s)", flush=True)
        if out_dir is not None and config.checkpoint_every > 0 \
                and (t + 1) % config.checkpoint_every == 0 and t + 1 < config.steps:
            ckpt = make_checkpoint(decoder, optimizer, t + 1, config)
            save_checkpoint(ckpt, out_dir / f"checkpoint_step{t + 1:06d}.bin")
    ckpt = make_checkpoint(decoder, optimizer, config.steps, config)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.bin")
    return ckpt


def finetune(config: TrainConfig, init: "Checkpoint", dataset, external,
             ensemble=None, out_dir=None, log_every: int = 100) -> "Checkpoint":
    """Refine a pre-trained decoder against an encoder ensemble at fixed tau.

    Per batch: embed targets with the primary encoder, decode noise, compose
    onto unrelated images drawn from the external dataset, evaluate the
    configured objective for every ensemble member.
    """
    if config.stage != "finetune":
        raise ConfigError(f"finetune called with stage={config.stage!r}")
    from .config import build_ensemble
    if ensemble is None:
        ensemble = build_ensemble(config, build_encoder(config.encoder))
    primary = ensemble.primary
    h, w, _ = primary.input_shape
    per_epoch = len(dataset) // config.batch_size
    if per_epoch == 0:
        raise ConfigError(f"dataset of {len(dataset)} images is smaller than "
                          f"batch_size={config.batch_size}")
    total = config.epochs * per_epoch
    decoder = NoiseDecoder(embed_dim=primary.embed_dim, output_shape=(h, w, 3),
                           epsilon=config.epsilon, width=config.decoder_width,
                           seed=config.seed)
    _check_decoder_compat(init, decoder)
    _load_decoder_state(decoder, init)
    optimizer = make_optimizer(decoder, config)
    start_step = 0
    if init.fingerprint == config.fingerprint:
        start_step = init.step
        _load_optimizer_state(optimizer, decoder, init)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = _RunLog(out_dir / "loss_log.csv" if out_dir is not None else None)
    t0 = time.time()
    order = None
    cur_epoch = -1
    for t in range(start_step, total):
        epoch, pos = divmod(t, per_epoch)
        if epoch != cur_epoch:
            order = _epoch_order(config.seed, epoch, len(dataset))
            cur_epoch = epoch
        idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
        targets = dataset.load(idx.tolist())
        cur_lr = lr_at(t, total, config.learning_rate, config.lr_floor)
        for grp in optimizer.param_groups:
            grp["lr"] = cur_lr
        with torch.no_grad():
            z = encode(primary, targets)
        delta = decode(decoder, z)
        unrelated = sample_unrelated(external, targets.shape[0],
                                     rng_seed=[config.seed, _UNRELATED_STREAM, t])
        adv = compose_adversarial(delta, unrelated.to(delta.dtype))
        lv = ensemble_loss(ensemble, targets, adv, config.objective, config.fixed_tau)
        optimizer.zero_grad(set_to_none=True)
        lv.value.backward()
        optimizer.step()
        loss = float(lv.value.detach())
        _check_finite(loss, t)
        log.append(t, cur_lr, config.fixed_tau, loss)
        if log_every and (t % log_every == 0 or t == total - 1):
            print(f"[finetune] step {t + 1}/{total} epoch {epoch + 1} loss {loss:.4f} "
                  f"({time.time() - t0:.0f}s)", flush=True)
        if out_dir is not None and config.checkpoint_every > 0 \
                and (t + 1) % config.checkpoint_every == 0 and t + 1 < total:
            save_checkpoint(make_checkpoint(decoder, optimizer, t + 1, config),
                            out_dir / f"checkpoint_step{t + 1:06d}.bin")
    ckpt = make_checkpoint(decoder, optimizer, total, config)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.bin")
    return ckpt


def generate_attack(decoder: NoiseDecoder, encoder, targets: torch.Tensor,
                    cleans: torch.Tensor) -> torch.Tensor:
    """Turn target images into noise and plant it on clean images.

    Pure inference: x' = clamp(cleans + F(E(targets)), 0, 1).
    """
    if targets.shape[0] != cleans.shape[0]:
        raise DimensionError(f"targets and cleans disagree on batch size: "
                             f"{targets.shape[0]} vs {cleans.shape[0]}")
    with torch.no_grad():
        z = encode(encoder, targets)
        delta = decode(decoder, z)
        return compose_adversarial(delta, cleans.to(delta.dtype))


# --- checkpoints ---------------------------------------------------------


@dataclass
class Checkpoint:
    """Decoder weights plus everything needed to continue the run."""

    state: Dict[str, np.ndarray]
    hyper: dict
    step: int
    fingerprint: str
    seed: int
    opt_state: Dict[str, np.ndarray] = field(default_factory=dict)


def make_checkpoint(decoder: NoiseDecoder, optimizer, step: int,
                    config: TrainConfig) -> Checkpoint:
    h, w, _ = decoder.output_shape
    state = {k: v.detach().cpu().numpy().copy() for k, v in decoder.state_dict().items()}
    opt_state = {}
    params = [p for grp in optimizer.param_groups for p in grp["params"]]
    names = list(decoder.state_dict().keys())
    for name, p in zip(names, params):
        st = optimizer.state.get(p)
        if st:
            opt_state[f"{name}.exp_avg"] = st["exp_avg"].detach().cpu().numpy().copy()
            opt_state[f"{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy().copy()
            opt_state[f"{name}.step"] = np.asarray(st["step"].detach().cpu().numpy(), dtype=np.float64)
    hyper = {"embed_dim": decoder.embed_dim, "height": h, "width_px": w,
             "epsilon": decoder.epsilon, "width": decoder.width, "init_seed": decoder.seed}
    return Checkpoint(state=state, hyper=hyper, step=step,
                      fingerprint=config.fingerprint, seed=config.seed, opt_state=opt_state)


def _np_dtype_tag(arr: np.ndarray) -> str:
    return arr.dtype.newbyteorder("<").str


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Single binary file: magic, JSON header, raw little-endian tensor bytes,
    sha256 trailer. Round-trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    payload = b""
    for section, table in (("state", ckpt.state), ("opt", ckpt.opt_state)):
        for name, arr in table.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            entries.append({"section": section, "name": name, "dtype": _np_dtype_tag(arr),
                            "shape": list(arr.shape), "nbytes": len(raw)})
            payload += raw
    header = json.dumps({"format": "advgen-checkpoint", "version": 1,
                         "step": ckpt.step, "fingerprint": ckpt.fingerprint,
                         "seed": ckpt.seed, "hyper": ckpt.hyper,
                         "tensors": entries}, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<Q", len(header)) + header + payload
    digest = hashlib.sha256(body).digest()
    path.write_bytes(body + digest)
    return path


def load_checkpoint(path, expect_fingerprint: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 8 + 32 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic or truncated)")
    body, digest = raw[:-32], raw[-32:]
    computed = hashlib.sha256(body).digest()
    if computed != digest:
        raise CheckpointError(
            f"integrity check failed for {path}: stored {digest.hex()[:16]} "
            f"!= computed {computed.hex()[:16]}")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", body[off:off + 8])
    off += 8
    try:
        header = json.loads(body[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from None
    off += hlen
    state, opt_state = {}, {}
    for entry in header["tensors"]:
        n = entry["nbytes"]
        arr = np.frombuffer(body[off:off + n], dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        off += n
        (state if entry["section"] == "state" else opt_state)[entry["name"]] = arr
    if off != len(body):
        raise CheckpointError(f"checkpoint {path} has {len(body) - off} trailing bytes")
    ckpt = Checkpoint(state=state, hyper=header["hyper"], step=int(header["step"]),
                      fingerprint=header["fingerprint"], seed=int(header["seed"]),
                      opt_state=opt_state)
    if expect_fingerprint is not None and expect_fingerprint != ckpt.fingerprint:
        warnings.warn(f"checkpoint {path} was produced by config {ckpt.fingerprint[:12]}, "
                      f"expected {expect_fingerprint[:12]}; continuing with its weights")
    return ckpt


def restore_decoder(ckpt: Checkpoint, dtype=torch.float32) -> NoiseDecoder:
    h = ckpt.hyper
    decoder = NoiseDecoder(embed_dim=h["embed_dim"], output_shape=(h["height"], h["width_px"], 3),
                           epsilon=h["epsilon"], width=h["width"], seed=h["init_seed"],
                           dtype=dtype)
    _load_decoder_state(decoder, ckpt)
    return decoder


def _check_decoder_compat(ckpt: Checkpoint, decoder: NoiseDecoder):
    h = ckpt.hyper
    want = (decoder.embed_dim, decoder.output_shape[0], decoder.output_shape[1], decoder.width)
    got = (h["embed_dim"], h["height"], h["width_px"], h["width"])
    if want != got:
        raise DimensionError(f"checkpoint shape {got} (embed_dim, H, W, width) does not match "
                             f"configured decoder {want}")


def _load_decoder_state(decoder: NoiseDecoder, ckpt: Checkpoint):
    param = next(decoder.parameters())
    sd = {k: torch.from_numpy(v).to(param.dtype) for k, v in ckpt.state.items()}
    decoder.load_state_dict(sd)


def _load_optimizer_state(optimizer, decoder: NoiseDecoder, ckpt: Checkpoint):
    if not ckpt.opt_state:
        return
    names = list(decoder.state_dict().keys())
    params = [p for grp in optimizer.param_groups for p in grp["params"]]
    for name, p in zip(names, params):
        if f"{name}.exp_avg" not in ckpt.opt_state:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(np.asarray(ckpt.opt_state[f"{name}.step"]).reshape(-1)[0])),
            "exp_avg": torch.from_numpy(ckpt.opt_state[f"{name}.exp_avg"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(ckpt.opt_state[f"{name}.exp_avg_sq"]).to(p.dtype),
        }
