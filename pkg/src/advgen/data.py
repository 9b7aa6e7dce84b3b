"""Dataset handles, the bundled synthetic toy set, and file-format helpers.

Images travel through the package as float tensors in [0,1], shaped
(n, 3, H, W). On disk they are 8-bit PNGs quantized with round-to-nearest, so
an encode/decode round trip moves a pixel by at most 1/510.
"""

import io
import json
import struct
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .errors import ContractError, EmptySourceError, IngestionError, LoadError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def synth_image(seed, index: int, size=(32, 32)) -> np.ndarray:
    """One procedural toy image: base color plus three sinusoid gratings.

    Each index gets its own generator stream, so any subset of a synthetic
    dataset decodes identically regardless of access order.
    """
    rng = np.random.default_rng([int(seed), int(index)])
    h, w = size
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    base = rng.uniform(0.3, 0.7, size=3)
    img = np.repeat(base[:, None, None], h, axis=1).repeat(w, axis=2)
    for _ in range(3):
        fy, fx = rng.integers(1, 5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.05, 0.18)
        cdir = rng.normal(size=3)
        cdir /= np.abs(cdir).max()
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img = img + amp * cdir[:, None, None] * wave[None]
    return np.clip(img, 0.0, 1.0)


@dataclass
class SyntheticDataset:
    """In-memory procedural dataset; index i is a pure function of (seed, i)."""

    count: int
    seed: int
    size: Tuple[int, int] = (32, 32)

    def __len__(self):
        return self.count

    @property
    def ids(self) -> List[str]:
        return [f"synth-{self.seed}-{i:05d}" for i in range(self.count)]

    def load(self, indices: Sequence[int], dtype=torch.float32) -> torch.Tensor:
        out = np.stack([synth_image(self.seed, i, self.size) for i in indices])
        return torch.tensor(out, dtype=dtype)

    def load_all(self, dtype=torch.float32) -> torch.Tensor:
        return self.load(range(self.count), dtype=dtype)


def _decode_image(raw: bytes, ref: str, resize) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im = im.convert("RGB")
            if resize is not None:
                im = im.resize((resize[1], resize[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0  # (H, W, 3)
    except Exception as e:
        raise IngestionError(f"failed to decode {ref}: {e}") from None
    return arr.transpose(2, 0, 1)


@dataclass
class DatasetHandle:
    """Lazy image source with a deterministic, lexicographically ordered index."""

    root: Path
    index: Tuple[str, ...]
    kind: str  # "directory" or "sharded-archive"
    resize: Optional[Tuple[int, int]] = None

    def __len__(self):
        return len(self.index)

    @property
    def ids(self) -> List[str]:
        return list(self.index)

    def load(self, indices: Sequence[int], dtype=torch.float32) -> torch.Tensor:
        arrays = []
        for i in indices:
            ref = self.index[i]
            if self.kind == "directory":
                try:
                    raw = (self.root / ref).read_bytes()
                except OSError as e:
                    raise IngestionError(f"failed to read {ref}: {e}") from None
            else:
                shard, member = ref.split("::", 1)
                try:
                    with tarfile.open(self.root / shard) as tf:
                        raw = tf.extractfile(member).read()
                except Exception as e:
                    raise IngestionError(f"failed to read {ref}: {e}") from None
            arrays.append(_decode_image(raw, ref, self.resize))
        shapes = {a.shape for a in arrays}
        if len(shapes) > 1:
            raise IngestionError(
                f"images have inconsistent shapes {sorted(shapes)}; declare a resize")
        return torch.tensor(np.stack(arrays), dtype=dtype)

    def load_all(self, dtype=torch.float32) -> torch.Tensor:
        return self.load(range(len(self)), dtype=dtype)


def load_dataset(path, kind: str = "directory", resize=None) -> DatasetHandle:
    """Index a dataset directory or a directory of tar shards.

    The index is sorted by relative posix path (and shard::member for
    archives), so seeded runs sample identically on any platform.
    """
    root = Path(path)
    if not root.exists():
        raise IngestionError(f"dataset path does not exist: {root}")
    if kind == "directory":
        refs = sorted(p.relative_to(root).as_posix() for p in root.rglob("*")
                      if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    elif kind == "sharded-archive":
        shards = [root.name] if root.is_file() else sorted(
            p.name for p in root.glob("*.tar"))
        if root.is_file():
            root = root.parent
        refs = []
        for shard in shards:
            try:
                with tarfile.open(root / shard) as tf:
                    refs.extend(f"{shard}::{m.name}" for m in tf.getmembers()
                                if m.isfile() and Path(m.name).suffix.lower() in IMAGE_EXTENSIONS)
            except tarfile.TarError as e:
                raise IngestionError(f"failed to open shard {shard}: {e}") from None
        refs.sort()
    else:
        raise IngestionError(f"unknown dataset kind {kind!r}")
    if not refs:
        raise EmptySourceError(f"no images found under {root} (kind={kind})")
    return DatasetHandle(root=root, index=tuple(refs), kind=kind, resize=resize)


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Map a [0,1] float image to the 8-bit grid by round-to-nearest."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_image_png(path, img_chw: np.ndarray):
    arr = quantize_image(img_chw).transpose(1, 2, 0)  # (H, W, 3)
    Image.fromarray(arr).save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def export_adversarial_png(adversarial: torch.Tensor, cleans: torch.Tensor, epsilon: float,
                           out_dir, names=None, fingerprint: str = "") -> List[Path]:
    """Write adversarial images as PNGs with a file-level budget guarantee.

    Noise is quantized on the integer grid before addition:
    q(x') = clamp(q(clean) + round(255 * delta), 0, 255), so every decoded
    file differs from the quantized clean image by at most round(255 * epsilon)
    levels per pixel. A manifest carrying the config fingerprint sits next to
    the images.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    adv = adversarial.detach().cpu().numpy()
    cln = cleans.detach().cpu().numpy()
    budget_levels = int(np.rint(255.0 * epsilon))
    if names is None:
        names = [f"adv_{i:05d}.png" for i in range(adv.shape[0])]
    paths = []
    for i, name in enumerate(names):
        qc = np.clip(np.rint(cln[i] * 255.0), 0, 255)
        dq = np.rint((adv[i] - cln[i]) * 255.0)
        qa = np.clip(qc + dq, 0, 255)
        if np.abs(qa - qc).max() > budget_levels:
            raise ContractError(f"quantized noise in {name} exceeded {budget_levels} levels")
        p = out_dir / name
        Image.fromarray(qa.astype(np.uint8).transpose(1, 2, 0)).save(p, format="PNG")
        paths.append(p)
    manifest = {"fingerprint": fingerprint, "epsilon": epsilon,
                "budget_levels": budget_levels, "files": [p.name for p in paths]}
    (out_dir / "export_manifest.json").write_text(json.dumps(manifest, indent=2))
    return paths


def save_embeddings(path, embeddings: np.ndarray, ids: Sequence[str]) -> Path:
    """Binary embedding matrix: <II little-endian (rows, dim) header, then
    row-major float32, with row ids in a sidecar text file."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(embeddings), dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {arr.shape}")
    if len(ids) != arr.shape[0]:
        raise ValueError(f"{arr.shape[0]} rows but {len(ids)} ids")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())
    Path(str(path) + ".ids").write_text("".join(f"{i}\n" for i in ids))
    return path


def load_embeddings(path) -> Tuple[np.ndarray, List[str]]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"embedding file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise LoadError(f"embedding file too short: {path}")
    rows, dim = struct.unpack("<II", raw[:8])
    expect = 8 + rows * dim * 4
    if len(raw) != expect:
        raise LoadError(f"embedding file {path} has {len(raw)} bytes, expected {expect}")
    mat = np.frombuffer(raw[8:], dtype="<f4").reshape(rows, dim).copy()
    ids_path = Path(str(path) + ".ids")
    ids = ids_path.read_text().splitlines() if ids_path.exists() else [str(i) for i in range(rows)]
    return mat, ids
