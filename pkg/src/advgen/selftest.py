"""Fast invariant smoke suite behind the `selftest` CLI command.

Checks the structural guarantees that everything else leans on: the noise
budget, derangement shuffling, the temperature schedule endpoints, loss and
ranking oracles, and PNG quantization. Runs in seconds on the bundled
defaults; a config can override epsilon and sizes.
"""

import math
import tempfile
from pathlib import Path

import numpy as np
import torch

from .augment import k_augment, sample_derangement
from .data import SyntheticDataset, load_image_png, save_image_png
from .decoder import NoiseDecoder, compose_adversarial, decode
from .evaluate import recall_at_k, similarity_matrix
from .objectives import TemperatureSchedule, contrastive_loss, temperature


def _check(name, cond, detail=""):
    status = "ok" if cond else "FAILED"
    print(f"[selftest] {name}: {status}" + (f" ({detail})" if detail else ""), flush=True)
    return bool(cond)


def run_selftest(cfg=None) -> bool:
    cfg = cfg or {}
    epsilon = float((cfg.get("decoder") or {}).get("epsilon", 16 / 255))
    # bound in the decoder's compute dtype: float32 may round epsilon up a ulp
    eps_bound = float(np.float32(epsilon))
    rng = np.random.default_rng(0)
    ok = True

    # structural noise budget over random weights
    worst = 0.0
    for i in range(30):
        dec = NoiseDecoder(embed_dim=8, output_shape=(8, 8, 3), epsilon=epsilon,
                           width=8, seed=int(rng.integers(1 << 31)))
        z = torch.randn(4, 8, dtype=torch.float32)
        z = z / z.norm(dim=1, keepdim=True)
        worst = max(worst, float(decode(dec, z).abs().max()))
    ok &= _check("noise budget", worst <= eps_bound,
                 f"max |delta| {worst:.6f} <= eps {epsilon:.6f} over 30 random decoders")

    # composition stays a valid image within the budget
    clean = torch.rand(4, 3, 8, 8)
    noise = (torch.rand(4, 3, 8, 8) * 2 - 1) * epsilon
    out = compose_adversarial(noise, clean)
    dev = float((out - clean).abs().max())
    ok &= _check("composition", bool(((out >= 0) & (out <= 1)).all()) and dev <= eps_bound,
                 f"range [0,1], max deviation {dev:.6f}")

    # derangements: no fixed points, n=2 forced swap
    fixed = 0
    for i in range(200):
        n = int(rng.integers(2, 33))
        p = sample_derangement(n, np.random.default_rng(i))
        fixed += int(np.sum(p == np.arange(n)))
    swap = sample_derangement(2, np.random.default_rng(1))
    ok &= _check("derangements", fixed == 0 and list(swap) == [1, 0],
                 "0 fixed points in 200 samples; n=2 gives the swap")

    # k-augmentation bookkeeping
    noise = torch.randn(6, 3, 8, 8)
    imgs = torch.rand(6, 3, 8, 8)
    aug = k_augment(noise, imgs, 5, rng_seed=0)
    ok &= _check("k-augmentation", len(aug.mini_batches) == 5
                 and all(nb[0] is noise for nb in aug.mini_batches),
                 "5 mini-batches, noise order preserved")

    # temperature schedule endpoints and midpoint
    sched = TemperatureSchedule(1.0, 0.07, 10000)
    mid = temperature(sched, 5000)
    ok &= _check("temperature schedule",
                 temperature(sched, 0) == 1.0 and temperature(sched, 10000) == 0.07
                 and abs(mid - math.sqrt(0.07)) < 1e-9,
                 f"tau(0)=1, tau(T)=0.07, tau(T/2)={mid:.7f}")

    # contrastive loss against a brute-force oracle
    z = torch.randn(8, 8, dtype=torch.float64)
    z = z / z.norm(dim=1, keepdim=True)
    za = torch.randn(8, 8, dtype=torch.float64)
    za = za / za.norm(dim=1, keepdim=True)
    lv = contrastive_loss(z, za, 0.2)
    acc = 0.0
    for i in range(8):
        den = sum(math.exp(float(z[i] @ za[j]) / 0.2) for j in range(8))
        acc -= math.log(math.exp(float(z[i] @ za[i]) / 0.2) / den)
    ok &= _check("contrastive oracle", abs(float(lv.value) - acc / 8) < 1e-9,
                 f"|loss - oracle| = {abs(float(lv.value) - acc / 8):.2e}")

    # recall against a tiny hand ranking
    sim = np.eye(5)
    rec = recall_at_k(similarity_matrix(np.eye(5), np.eye(5)), {i: {i} for i in range(5)}, [1, 5])
    ok &= _check("recall", rec[1] == 100.0 and rec[5] == 100.0 and sim.shape == (5, 5),
                 "identity similarity ranks perfectly")

    # PNG quantization round trip
    ds = SyntheticDataset(count=2, seed=3, size=(16, 16))
    batch = ds.load_all().numpy()
    with tempfile.TemporaryDirectory() as td:
        p = Path(td) / "img.png"
        save_image_png(p, batch[0])
        back = load_image_png(p)
    err = float(np.abs(back - batch[0]).max())
    ok &= _check("png quantization", err <= 1 / 510 + 1e-12,
                 f"round-trip error {err:.6f} <= 1/510")

    print(f"[selftest] {'all checks passed' if ok else 'FAILURES detected'}")
    return ok
