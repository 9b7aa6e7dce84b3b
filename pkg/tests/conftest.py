import time
from pathlib import Path

import pytest
import yaml

from advgen.cli import main

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One shared end-to-end run of the bundled toy pipeline.

    Pretrains on the bundled config, generates attacks, and evaluates, all
    through the CLI. Several tests read from this run, so it executes once per
    session; timings for each stage are recorded.
    """
    root = tmp_path_factory.mktemp("toyrun")
    times = {}

    t0 = time.time()
    rc = main(["pretrain", "--config", str(CONFIGS / "toy_pretrain.yaml"),
               "--out", str(root / "pretrain")])
    times["pretrain"] = time.time() - t0
    assert rc == 0, "toy pretrain failed"

    t0 = time.time()
    rc = main(["attack", "--config", str(CONFIGS / "toy_attack.yaml"),
               "--checkpoint", str(root / "pretrain" / "checkpoint.bin"),
               "--out", str(root / "attack")])
    times["attack"] = time.time() - t0
    assert rc == 0, "toy attack failed"

    eval_cfg = {
        "seed": 0,
        "eval": {
            "adv_embeddings": str(root / "attack" / "adv_emb.bin"),
            "text_embeddings": str(root / "attack" / "text_emb.bin"),
            "gallery_embeddings": str(root / "attack" / "gallery_emb.bin"),
            "ground_truth": str(root / "attack" / "gt.json"),
            "ks": [1, 5, 10],
        },
    }
    eval_cfg_path = root / "eval_config.yaml"
    eval_cfg_path.write_text(yaml.safe_dump(eval_cfg))
    t0 = time.time()
    rc = main(["eval", "--config", str(eval_cfg_path), "--out", str(root / "eval")])
    times["eval"] = time.time() - t0
    assert rc == 0, "toy eval failed"

    return {"root": root, "pretrain": root / "pretrain", "attack": root / "attack",
            "eval": root / "eval", "times": times, "eval_config": eval_cfg_path}
