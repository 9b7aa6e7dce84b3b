"""Command-line entry points: pretrain, finetune, attack, eval, selftest.

Each command reads one YAML config (plus a few flag overrides), writes its
artifacts under --out, and drops a manifest.json recording the config
fingerprint, seed, library versions, and timing.
"""

import argparse
import json
import platform
import sys
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (TrainConfig, build_dataset, build_encoder, build_ensemble,
                     config_fingerprint, load_config)
from .data import export_adversarial_png, save_embeddings
from .errors import AdvGenError, ConfigError
from .evaluate import evaluate_files, write_report
from .train import (finetune, generate_attack, load_checkpoint, pretrain, restore_decoder)

_CLS_STREAM = 4


def _manifest(out_dir: Path, command: str, fingerprint: str, seed, t0: float, outputs):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "fingerprint": fingerprint,
        "seed": seed,
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "torch": torch.__version__, "advgen": __version__},
        "started": datetime.fromtimestamp(t0, tz=timezone.utc).isoformat(),
        "elapsed_seconds": round(time.time() - t0, 3),
        "outputs": [str(o) for o in outputs],
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "checkpoint", None) is not None:
        cfg.setdefault("attack", {})
        if args.command == "attack":
            cfg["attack"]["checkpoint"] = args.checkpoint
        else:
            cfg.setdefault("train", {})["init_checkpoint"] = args.checkpoint
    return cfg


def _cmd_pretrain(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    t0 = time.time()
    tc = TrainConfig.from_dict(cfg)
    dataset = build_dataset(tc.data.get("train"))
    init = None
    init_path = (cfg.get("train") or {}).get("init_checkpoint")
    if init_path:
        init = load_checkpoint(init_path, expect_fingerprint=tc.fingerprint)
    out = Path(args.out)
    pretrain(tc, dataset, out_dir=out, init=init)
    _manifest(out, "pretrain", tc.fingerprint, tc.seed, t0,
              ["checkpoint.bin", "loss_log.csv"])
    print(f"[pretrain] done, checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    t0 = time.time()
    tc = TrainConfig.from_dict(cfg)
    init_path = (cfg.get("train") or {}).get("init_checkpoint")
    if not init_path:
        raise ConfigError("finetune needs train.init_checkpoint (or --checkpoint)")
    init = load_checkpoint(init_path)
    dataset = build_dataset(tc.data.get("train"))
    external = build_dataset(tc.data.get("external"))
    ensemble = build_ensemble(tc, build_encoder(tc.encoder))
    out = Path(args.out)
    finetune(tc, init, dataset, external, ensemble=ensemble, out_dir=out)
    _manifest(out, "finetune", tc.fingerprint, tc.seed, t0,
              ["checkpoint.bin", "loss_log.csv"])
    print(f"[finetune] done, checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    t0 = time.time()
    fingerprint = config_fingerprint(cfg)
    seed = int(cfg.get("seed", 0))
    blk = cfg.get("attack") or {}
    for key in ("checkpoint", "targets", "cleans"):
        if key not in blk:
            raise ConfigError(f"attack config needs attack.{key}")
    ckpt = load_checkpoint(blk["checkpoint"])
    decoder = restore_decoder(ckpt)
    encoder = build_encoder(cfg.get("encoder") or {"kind": "toy", "seed": 7})
    targets_ds = build_dataset(blk["targets"])
    cleans_ds = build_dataset(blk["cleans"])
    targets = targets_ds.load_all()
    cleans = cleans_ds.load_all()
    adv = generate_attack(decoder, encoder, targets, cleans)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if blk.get("export_png", True):
        paths = export_adversarial_png(adv, cleans, decoder.epsilon, out / "adv_png",
                                       fingerprint=fingerprint)
        outputs.append(f"adv_png ({len(paths)} files)")

    with torch.no_grad():
        from .encoders import encode
        adv_emb = encode(encoder, adv).numpy()
        clean_emb = encode(encoder, cleans).numpy()
        target_emb = encode(encoder, targets).numpy()
        if "distractors" in blk:
            distract = build_dataset(blk["distractors"]).load_all()
            distract_emb = encode(encoder, distract).numpy()
        else:
            distract_emb = np.zeros((0, adv_emb.shape[1]), dtype=np.float32)
    # text stand-in: one caption per gallery image, embedded at the image itself
    text_emb = np.concatenate([target_emb, distract_emb])
    gallery_emb = np.concatenate([adv_emb, distract_emb])
    nt = targets.shape[0]
    save_embeddings(out / "adv_emb.bin", adv_emb, [f"adv-{i:05d}" for i in range(nt)])
    save_embeddings(out / "clean_emb.bin", clean_emb, [f"clean-{i:05d}" for i in range(nt)])
    save_embeddings(out / "target_emb.bin", target_emb, [f"target-{i:05d}" for i in range(nt)])
    save_embeddings(out / "text_emb.bin", text_emb,
                    [f"text-{i:05d}" for i in range(text_emb.shape[0])])
    save_embeddings(out / "gallery_emb.bin", gallery_emb,
                    [f"img-{i:05d}" for i in range(gallery_emb.shape[0])])

    n_text = text_emb.shape[0]
    gt = {"tr": {str(i): [i] for i in range(nt)},
          "ir": {str(j): [j] for j in range(n_text)}}
    n_cand = int(blk.get("candidates", 10))
    if n_text > nt and n_cand >= 2:
        cands, gt_idx = [], []
        for i in range(nt):
            rng = np.random.default_rng([seed, _CLS_STREAM, i])
            wrong = rng.choice(np.arange(nt, n_text), size=min(n_cand - 1, n_text - nt),
                               replace=False)
            ids = [int(i)] + [int(x) for x in wrong]
            pos = int(rng.integers(0, len(ids)))
            ids[0], ids[pos] = ids[pos], ids[0]
            cands.append(ids)
            gt_idx.append(ids.index(i))
        gt["classification"] = {"candidates": cands, "gt_index": gt_idx}
    (out / "gt.json").write_text(json.dumps(gt, indent=2) + "\n")
    outputs += ["adv_emb.bin", "clean_emb.bin", "target_emb.bin", "text_emb.bin",
                "gallery_emb.bin", "gt.json"]
    _manifest(out, "attack", fingerprint, seed, t0, outputs)
    print(f"[attack] wrote {nt} adversarial images and embeddings to {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    t0 = time.time()
    fingerprint = config_fingerprint(cfg)
    blk = cfg.get("eval") or {}
    for key in ("adv_embeddings", "text_embeddings", "gallery_embeddings", "ground_truth"):
        if key not in blk:
            raise ConfigError(f"eval config needs eval.{key}")
    report = evaluate_files(blk["adv_embeddings"], blk["text_embeddings"],
                            blk["gallery_embeddings"], blk["ground_truth"],
                            ks=blk.get("ks", [1, 5, 10]),
                            metadata={"fingerprint": fingerprint})
    out = Path(args.out)
    write_report(report, out / "report.json")
    _manifest(out, "eval", fingerprint, cfg.get("seed", 0), t0, ["report.json", "report.csv"])
    tr, ir = report.tr_at, report.ir_at
    print("[eval] " + " ".join(f"TR@{k}={v}" for k, v in tr.items())
          + " " + " ".join(f"IR@{k}={v}" for k, v in ir.items())
          + f" R@Mean={report.r_mean:.2f}"
          + (f" cls_asr={report.classification_asr}" if report.classification_asr is not None else ""))
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest
    t0 = time.time()
    cfg = load_config(args.config) if args.config else None
    ok = run_selftest(cfg)
    if args.out:
        fp = config_fingerprint(cfg) if cfg else ""
        _manifest(Path(args.out), "selftest", fp, cfg.get("seed", 0) if cfg else 0, t0, [])
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="advgen",
        description="Train embedding-conditioned noise decoders and evaluate "
                    "targeted adversarial attacks on image encoders.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in (
            ("pretrain", _cmd_pretrain, True),
            ("finetune", _cmd_finetune, True),
            ("attack", _cmd_attack, True),
            ("eval", _cmd_eval, True),
            ("selftest", _cmd_selftest, False)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=needs_config,
                        help="YAML config file" + ("" if needs_config else " (optional)"))
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=None, help="output directory (default runs/<command>)")
        if name in ("finetune", "attack"):
            sp.add_argument("--checkpoint", default=None, help="override checkpoint path")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None:
        args.out = f"runs/{args.command}"
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"[error] config: {e}", file=sys.stderr)
        return 2
    except AdvGenError as e:
        print(f"[error] {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        traceback.print_exc()
        print(f"[error] unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
