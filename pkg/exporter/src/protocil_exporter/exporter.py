"""Export frozen-encoder embeddings of an image-folder dataset to FEATSET.

The dataset root holds one subfolder per class; the class list maps original
class ids to folder names. Original ids become contiguous 0-based FEATSET
labels in ascending original-id order, and the mapping is written into the
manifest alongside the exact preprocessing constants, so an export is fully
reproducible from its manifest file.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

FEATSET_MAGIC = b"FSET"
FEATSET_VERSION = 1
_HEADER = struct.Struct("<4sBIII")

# ImageNet statistics, the customary default for published encoders
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)


class ExportError(Exception):
    """Unusable checkpoint, dataset folder, or manifest."""


@dataclass(frozen=True)
class ExportManifest:
    """Everything needed to reproduce one export run.

    ``checkpoint`` is either a TorchScript archive path (the module itself is
    taken as the backbone) or ``torchvision:<arch>[@state_dict.pth]``, whose
    classification head is replaced with the identity. ``classes`` maps
    original class ids to folder names under ``data_root``.
    ``embedding_dim`` is validated against the encoder's actual output width.
    ``l2_normalize`` rescales each embedding to unit length before writing.
    """

    checkpoint: str
    data_root: str
    classes: tuple
    out_path: str
    embedding_dim: int
    l2_normalize: bool = False
    image_size: int = 224
    pixel_mean: tuple = DEFAULT_MEAN
    pixel_std: tuple = DEFAULT_STD
    batch_size: int = 64
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ExportError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.image_size < 1:
            raise ExportError(f"image_size must be >= 1, got {self.image_size}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.classes) < 1:
            raise ExportError("class list is empty")
        ids = [cid for cid, _ in self.classes]
        if len(set(ids)) != len(ids):
            raise ExportError(f"duplicate original class ids in {ids}")
        object.__setattr__(
            self,
            "classes",
            tuple((int(cid), str(folder)) for cid, folder in self.classes),
        )


def read_class_list(path):
    """Class-list file: one `original_id,folder_name` line per class."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise ExportError(
                    f"class list line {ln} is not 'id,folder': {line!r}"
                )
            try:
                entries.append((int(parts[0]), parts[1]))
            except ValueError:
                raise ExportError(
                    f"class list line {ln} has non-integer id: {parts[0]!r}"
                ) from None
    if not entries:
        raise ExportError(f"class list {path} is empty")
    return tuple(entries)


def _load_encoder(checkpoint):
    import torch

    if checkpoint.startswith("torchvision:"):
        import torchvision.models

        spec = checkpoint[len("torchvision:") :]
        arch, _, weights_path = spec.partition("@")
        factory = getattr(torchvision.models, arch, None)
        if factory is None:
            raise ExportError(f"unknown torchvision architecture {arch!r}")
        model = factory(weights=None)
        if weights_path:
            if not os.path.exists(weights_path):
                raise ExportError(f"state dict not found: {weights_path}")
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        # expose backbone outputs, not class logits
        for head in ("fc", "classifier", "head"):
            if hasattr(model, head):
                setattr(model, head, torch.nn.Identity())
                break
        return model
    if not os.path.exists(checkpoint):
        raise ExportError(f"checkpoint not found: {checkpoint}")
    try:
        return torch.jit.load(checkpoint, map_location="cpu")
    except Exception as exc:
        raise ExportError(
            f"checkpoint {checkpoint} is not a loadable TorchScript archive: {exc}"
        ) from None


def _list_images(folder):
    names = sorted(
        name
        for name in os.listdir(folder)
        if name.lower().endswith(IMAGE_EXTENSIONS)
    )
    return [os.path.join(folder, name) for name in names]


def _load_pixel_batch(paths, manifest):
    from PIL import Image

    mean = np.array(manifest.pixel_mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.array(manifest.pixel_std, dtype=np.float32).reshape(3, 1, 1)
    batch = np.empty((len(paths), 3, manifest.image_size, manifest.image_size),
                     dtype=np.float32)
    for i, path in enumerate(paths):
        with Image.open(path) as img:
            img = img.convert("RGB").resize(
                (manifest.image_size, manifest.image_size), Image.BILINEAR
            )
            arr = np.asarray(img, dtype=np.float32) / 255.0
        batch[i] = (arr.transpose(2, 0, 1) - mean) / std
    return batch


def export(manifest):
    """Run the frozen encoder over the dataset and write FEATSET + manifest.

    Returns (featset_path, manifest_path). Deterministic: a manifest exports
    to byte-identical files every run (eval mode, single-threaded inference,
    lexicographic file order).
    """
    import torch

    encoder = _load_encoder(manifest.checkpoint)
    encoder.eval()
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)  # bit-reproducible CPU inference
    try:
        ordered = sorted(manifest.classes)
        label_mapping = {orig: new for new, (orig, _) in enumerate(ordered)}
        all_feats = []
        all_labels = []
        per_class_counts = {}
        for orig_id, folder in ordered:
            class_dir = os.path.join(manifest.data_root, folder)
            if not os.path.isdir(class_dir):
                raise ExportError(
                    f"class folder missing: {class_dir} (original id {orig_id})"
                )
            paths = _list_images(class_dir)
            if not paths:
                raise ExportError(
                    f"class folder {class_dir} contains no images"
                )
            per_class_counts[orig_id] = len(paths)
            for lo in range(0, len(paths), manifest.batch_size):
                pixels = _load_pixel_batch(
                    paths[lo : lo + manifest.batch_size], manifest
                )
                with torch.no_grad():
                    out = encoder(torch.from_numpy(pixels))
                out = out.detach().cpu().numpy()
                if out.ndim != 2:
                    raise ExportError(
                        f"encoder returned shape {out.shape}; expected "
                        "(batch, embedding_dim) backbone outputs"
                    )
                if out.shape[1] != manifest.embedding_dim:
                    raise ExportError(
                        f"encoder produces {out.shape[1]}-dim embeddings, "
                        f"manifest declares {manifest.embedding_dim}"
                    )
                all_feats.append(out.astype(np.float32))
                all_labels.extend([label_mapping[orig_id]] * out.shape[0])
    finally:
        torch.set_num_threads(old_threads)

    feats = np.vstack(all_feats)
    if not np.isfinite(feats).all():
        raise ExportError("encoder produced non-finite embedding values")
    if manifest.l2_normalize:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        if (norms == 0).any():
            raise ExportError("cannot L2-normalize a zero embedding")
        feats = (feats / norms).astype(np.float32)
    labels = np.array(all_labels, dtype=np.uint32)

    _write_featset(manifest.out_path, feats, labels, len(ordered))
    manifest_path = manifest.out_path + ".manifest.json"
    doc = {
        "checkpoint": manifest.checkpoint,
        "data_root": manifest.data_root,
        "classes": [[cid, folder] for cid, folder in ordered],
        "label_mapping": {str(k): v for k, v in label_mapping.items()},
        "per_class_image_counts": {str(k): v for k, v in per_class_counts.items()},
        "out_path": manifest.out_path,
        "embedding_dim": manifest.embedding_dim,
        "l2_normalize": manifest.l2_normalize,
        "preprocessing": {
            "image_size": manifest.image_size,
            "resample": "bilinear",
            "pixel_range": "0-1",
            "pixel_mean": list(manifest.pixel_mean),
            "pixel_std": list(manifest.pixel_std),
        },
        "n_samples": int(labels.size),
        "extra": manifest.extra,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest.out_path, manifest_path


def _write_featset(path, feats, labels, class_count):
    n, dim = feats.shape
    record = np.zeros(n, dtype=[("label", "<u4"), ("feat", "<f4", (dim,))])
    record["label"] = labels
    record["feat"] = feats
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATSET_MAGIC, FEATSET_VERSION, n, dim, class_count))
        fh.write(record.tobytes())
