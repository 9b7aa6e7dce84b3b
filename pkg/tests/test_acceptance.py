"""End-to-end acceptance gate.

One test per release criterion; each prints a PASS line with the measured
quantity so a log shows the full scorecard. Oracles are independent
reimplementations (plain-python softmax loops, brute-force ranking).
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from advgen.augment import k_augment
from advgen.cli import main
from advgen.data import SyntheticDataset, load_embeddings, load_image_png, quantize_image
from advgen.decoder import NoiseDecoder, compose_adversarial, decode
from advgen.encoders import encode, make_toy_encoder
from advgen.evaluate import recall_at_k, retrieval_report
from advgen.objectives import (TemperatureSchedule, bidirectional_infonce, contrastive_loss,
                               cosine_loss, temperature)

EPS = 16.0 / 255.0


def unit_rows(rng, n, d, dtype=torch.float64):
    m = rng.normal(size=(n, d))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return torch.tensor(m, dtype=dtype)


def infonce_oracle(z, z_adv, tau):
    z, z_adv = z.numpy(), z_adv.numpy()
    n = z.shape[0]
    total = 0.0
    for i in range(n):
        sims = [math.exp(float(np.dot(z[i], z_adv[j])) / tau) for j in range(n)]
        total += -math.log(sims[i] / sum(sims))
    return total / n


class TestAcceptance:
    def test_criterion_1_loss_oracles(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(100)
        worst = 0.0
        for i in range(500):
            n = int(rng.integers(1, 65))
            d = int(rng.integers(2, 33))
            tau = float(rng.uniform(0.05, 2.0))
            z, z_adv = unit_rows(rng, n, d), unit_rows(rng, n, d)
            if i % 5 == 4:
                got = float(cosine_loss(z, z_adv).value)
                want = 1.0 - float(np.mean([np.dot(z.numpy()[j], z_adv.numpy()[j])
                                            for j in range(n)]))
            elif i % 5 in (2, 3):
                got = float(bidirectional_infonce(z, z_adv, tau).value)
                want = 0.5 * (infonce_oracle(z, z_adv, tau) + infonce_oracle(z_adv, z, tau))
            else:
                got = float(contrastive_loss(z, z_adv, tau).value)
                want = infonce_oracle(z, z_adv, tau)
            worst = max(worst, abs(got - want))
            assert abs(got - want) < 1e-9

        z1 = unit_rows(rng, 1, 8)
        assert abs(float(contrastive_loss(z1, z1.clone(), 0.07).value)) < 1e-12
        z2 = torch.eye(2, dtype=torch.float64)
        hand = float(contrastive_loss(z2, z2.clone(), 1.0).value)
        assert abs(hand - (-math.log(math.e / (math.e + 1.0)))) < 1e-9
        assert abs(hand - 0.3132617) < 1e-6
        elapsed = time.monotonic() - t0
        assert elapsed < 30.0
        print(f"\n[acceptance] criterion 1 loss oracles: PASS "
              f"(500 instances, worst gap {worst:.2e}, hand cases ok, {elapsed:.1f}s)")

    def test_criterion_2_gradients_vs_finite_differences(self):
        t0 = time.monotonic()
        enc = make_toy_encoder(3, input_shape=(8, 8, 3), embed_dim=6, dtype=torch.float64)
        dec = NoiseDecoder(embed_dim=6, output_shape=(8, 8, 3), epsilon=EPS, width=8,
                           seed=1, dtype=torch.float64)
        images = SyntheticDataset(count=4, seed=2, size=(8, 8)).load_all(dtype=torch.float64)
        with torch.no_grad():
            z = encode(enc, images)

        def loss_value():
            delta = decode(dec, z)
            adv = compose_adversarial(delta, images)
            return contrastive_loss(z, encode(enc, adv), 0.2).value

        for p in dec.parameters():
            p.grad = None
        loss_value().backward()

        h = 1e-6
        worst = 0.0
        analytic_all, fd_all = [], []
        for p in dec.parameters():
            flat = p.detach().reshape(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + h
                up = float(loss_value().detach())
                flat[j] = orig - h
                down = float(loss_value().detach())
                flat[j] = orig
                analytic_all.append(float(p.grad.reshape(-1)[j]))
                fd_all.append((up - down) / (2 * h))
        analytic_all, fd_all = np.array(analytic_all), np.array(fd_all)
        rel = np.linalg.norm(analytic_all - fd_all) / np.linalg.norm(fd_all)
        worst = max(worst, rel)
        assert rel < 1e-4

        # encoder input gradients on the same path
        x = images[:2].clone().requires_grad_(True)
        w = unit_rows(np.random.default_rng(3), 2, 6)
        (encode(enc, x) * w).sum().backward()
        ga = x.grad.detach().numpy()
        fd = np.zeros_like(ga)
        base = x.detach().clone()
        for idx in np.ndindex(*base.shape):
            for sign in (1.0, -1.0):
                pert = base.clone()
                pert[idx] += sign * h
                fd[idx] += sign * float((encode(enc, pert) * w).sum()) / (2 * h)
        rel_in = np.linalg.norm(ga - fd) / np.linalg.norm(fd)
        worst = max(worst, rel_in)
        assert rel_in < 1e-4
        elapsed = time.monotonic() - t0
        assert elapsed < 120.0
        print(f"\n[acceptance] criterion 2 gradient checks: PASS "
              f"({analytic_all.size} decoder coords rel {rel:.2e}, "
              f"input rel {rel_in:.2e}, {elapsed:.1f}s)")

    def test_criterion_3_temperature_schedule(self):
        sched = TemperatureSchedule(tau0=1.0, tau_final=0.07, horizon=10000)
        assert temperature(sched, 0) == 1.0
        assert temperature(sched, 10000) == 0.07
        mid = temperature(sched, 5000)
        assert abs(mid - math.sqrt(0.07)) < 1e-9
        assert abs(mid - 0.2645751) < 1e-6
        vals = [temperature(sched, t) for t in range(0, 10001, 10)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert temperature(sched, 20000) == 0.07
        print(f"\n[acceptance] criterion 3 temperature schedule: PASS "
              f"(endpoints exact, midpoint {mid:.9f}, monotone over 1000 samples)")

    def test_criterion_4_noise_budget(self, tmp_path):
        rng = np.random.default_rng(200)
        # the bound in the decoder's own dtype: float32 rounds 16/255 up by ~1.4e-9
        eps32 = float(np.float32(EPS))
        worst = 0.0
        for seed in range(1000):
            dec = NoiseDecoder(embed_dim=4, output_shape=(8, 8, 3), epsilon=EPS,
                               width=4, seed=seed)
            scale = 10.0 ** rng.uniform(-2, 3)
            z = torch.tensor(rng.normal(size=(2, 4)) * scale, dtype=torch.float32)
            with torch.no_grad():
                noise = decode(dec, z)
            worst = max(worst, float(noise.abs().max()))
            assert float(noise.abs().max()) <= eps32
        clean = torch.tensor(rng.random((2, 3, 8, 8)), dtype=torch.float32)
        adv = compose_adversarial(noise, clean)
        assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0
        assert float((adv - clean).abs().max()) <= eps32

        from advgen.data import export_adversarial_png
        export_adversarial_png(adv, clean, EPS, tmp_path / "png")
        budget_levels = round(255 * EPS)
        for i, p in enumerate(sorted((tmp_path / "png").glob("*.png"))):
            re_read = quantize_image(load_image_png(p))
            q_clean = quantize_image(clean[i].numpy())
            assert np.abs(re_read.astype(int) - q_clean.astype(int)).max() <= budget_levels
        single = torch.tensor(rng.random((3, 8, 8)), dtype=torch.float32)
        from advgen.data import save_image_png
        save_image_png(tmp_path / "s.png", single.numpy())
        rt = np.abs(load_image_png(tmp_path / "s.png") - single.numpy()).max()
        assert rt <= 1.0 / 510.0 + 1e-9
        print(f"\n[acceptance] criterion 4 noise budget: PASS "
              f"(1000 decoders, max |noise| {worst:.6f} <= {EPS:.6f}, "
              f"png within {budget_levels} levels, round trip {rt:.6f})")

    def test_criterion_5_shuffle_properties(self):
        rng = np.random.default_rng(300)
        total = 0
        for call in range(334):
            n = int(rng.integers(2, 41))
            gen = torch.Generator().manual_seed(call)
            noise = (torch.rand(n, 3, 4, 4, generator=gen) * 2 - 1) * EPS
            images = torch.rand(n, 3, 4, 4, generator=gen)
            out = k_augment(noise, images, k=3, rng_seed=call)
            assert len(out.mini_batches) == 3
            for (nz, img), perm in zip(out.mini_batches, out.permutations):
                assert nz is noise
                assert torch.equal(nz, noise)
                assert sorted(perm) == list(range(n))
                assert all(perm[i] != i for i in range(n))
                assert torch.equal(img, images[torch.as_tensor(list(perm))])
                total += 1
        swap = k_augment(noise[:2], images[:2], k=4, rng_seed=0)
        assert all(list(p) == [1, 0] for p in swap.permutations)
        assert total >= 1000
        print(f"\n[acceptance] criterion 5 shuffle properties: PASS "
              f"({total} derangements, zero fixed points, n=2 swaps, noise bitwise)")

    def test_criterion_6_recall_oracle_and_reference_row(self):
        rng = np.random.default_rng(400)

        def oracle(sim, gt, k):
            hits = 0
            for i, rel in gt.items():
                order = sorted(range(sim.shape[1]), key=lambda j: (-sim[i, j], j))
                hits += bool(set(order[:k]) & set(rel))
            return 100.0 * hits / len(gt)

        for _ in range(500):
            sim = rng.normal(size=(20, 20))
            if rng.random() < 0.4:
                sim = np.round(sim, 1)
            gt = {i: sorted(rng.choice(20, size=int(rng.integers(1, 4)), replace=False).tolist())
                  for i in range(20)}
            ks = (1, 5, 10)
            got = recall_at_k(sim, gt, ks)
            for k in ks:
                assert got[k] == oracle(sim, gt, k)

        from advgen.evaluate import EvalReport
        row = EvalReport(tr_at={1: 14.8, 5: 36.8, 10: 48.0},
                         ir_at={1: 17.59, 5: 42.02, 10: 56.05},
                         r_mean=(14.8 + 36.8 + 48.0 + 17.59 + 42.02 + 56.05) / 6.0)
        row.validate()
        assert abs(row.r_mean - 35.88) < 0.005
        print(f"\n[acceptance] criterion 6 recall oracle: PASS "
              f"(500 instances exact, reference row mean {row.r_mean:.4f} ~ 35.88)")

    def test_criterion_7_toy_end_to_end(self, toy_run):
        total_time = sum(toy_run["times"].values())
        atk = toy_run["attack"]
        adv, _ = load_embeddings(atk / "adv_emb.bin")
        tgt, _ = load_embeddings(atk / "target_emb.bin")
        cln, _ = load_embeddings(atk / "clean_emb.bin")
        txt, _ = load_embeddings(atk / "text_emb.bin")
        gt = json.loads((atk / "gt.json").read_text())
        gt_tr = {int(k): v for k, v in gt["tr"].items()}

        adv_cos = float((adv * tgt).sum(1).mean())
        clean_cos = float((cln * tgt).sum(1).mean())
        assert adv_cos >= 0.8, f"adversarial alignment {adv_cos:.3f}"
        assert clean_cos <= 0.2, f"clean-image alignment {clean_cos:.3f}"

        report = json.loads((toy_run["eval"] / "report.json").read_text())
        tr1 = report["tr_at"]["1"]
        assert tr1 >= 90.0, f"TR@1 {tr1}"
        order = np.argsort(-(cln @ txt.T), axis=1)
        clean_r1 = 100.0 * np.mean([int(order[i, 0]) in gt_tr[i] for i in range(cln.shape[0])])
        assert clean_r1 <= 5.0, f"clean R@1 {clean_r1}"
        assert total_time < 600.0, f"pipeline took {total_time:.0f}s"
        print(f"\n[acceptance] criterion 7 toy end to end: PASS "
              f"(adv_cos {adv_cos:.3f} >= 0.8, clean_cos {clean_cos:.3f} <= 0.2, "
              f"TR@1 {tr1:.1f}% >= 90%, clean R@1 {clean_r1:.1f}% <= 5%, "
              f"{total_time:.0f}s < 600s)")

    def test_criterion_8_pipeline_reproducibility(self, tmp_path, monkeypatch):
        def run(root):
            root.mkdir()
            (root / "pt.yaml").write_text("""\
stage: pretrain
seed: 0
encoder: {kind: toy, seed: 3, embed_dim: 8, image_size: [16, 16]}
decoder: {width: 8}
data:
  train: {kind: synthetic, count: 64, seed: 5, image_size: [16, 16]}
train: {batch_size: 16, k: 2, steps: 8, tau_horizon: 8, learning_rate: 0.001}
""")
            (root / "ft.yaml").write_text("""\
stage: finetune
seed: 0
encoder: {kind: toy, seed: 3, embed_dim: 8, image_size: [16, 16]}
decoder: {width: 8}
data:
  train: {kind: synthetic, count: 64, seed: 5, image_size: [16, 16]}
  external: {kind: synthetic, count: 32, seed: 6, image_size: [16, 16]}
train:
  batch_size: 16
  epochs: 2
  learning_rate: 0.0005
  init_checkpoint: pretrain/checkpoint.bin
""")
            (root / "atk.yaml").write_text("""\
seed: 0
encoder: {kind: toy, seed: 3, embed_dim: 8, image_size: [16, 16]}
attack:
  checkpoint: finetune/checkpoint.bin
  targets: {kind: synthetic, count: 8, seed: 21, image_size: [16, 16]}
  cleans: {kind: synthetic, count: 8, seed: 22, image_size: [16, 16]}
  distractors: {kind: synthetic, count: 16, seed: 23, image_size: [16, 16]}
  candidates: 4
""")
            (root / "ev.yaml").write_text("""\
eval:
  adv_embeddings: attack/adv_emb.bin
  text_embeddings: attack/text_emb.bin
  gallery_embeddings: attack/gallery_emb.bin
  ground_truth: attack/gt.json
  ks: [1, 2, 4]
""")
            monkeypatch.chdir(root)
            assert main(["pretrain", "--config", "pt.yaml", "--out", "pretrain"]) == 0
            assert main(["finetune", "--config", "ft.yaml", "--out", "finetune"]) == 0
            assert main(["attack", "--config", "atk.yaml", "--out", "attack"]) == 0
            assert main(["eval", "--config", "ev.yaml", "--out", "eval"]) == 0

        run(tmp_path / "a")
        run(tmp_path / "b")

        pairs = ["pretrain/checkpoint.bin", "finetune/checkpoint.bin",
                 "attack/adv_emb.bin", "attack/gallery_emb.bin", "attack/gt.json",
                 "eval/report.csv"]
        for rel in pairs:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), \
                f"{rel} differs between identical runs"
        rep_a = json.loads((tmp_path / "a" / "eval" / "report.json").read_text())
        rep_b = json.loads((tmp_path / "b" / "eval" / "report.json").read_text())
        for rep in (rep_a, rep_b):
            rep["metadata"].pop("elapsed_seconds", None)
        assert rep_a == rep_b
        print("\n[acceptance] criterion 8 pipeline reproducibility: PASS "
              "(checkpoints, embeddings, ground truth, and reports bitwise stable)")
