"""Image-folder dataset loading.

Layout: ``root/<class_name>/<image>`` with one directory per class.
Classes are labeled 0..C-1 in sorted directory-name order and files
are visited in sorted order inside each class, so the sample order is
a pure function of the folder contents.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DatasetError

_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# torchvision's ImageNet-trained preprocessing constants
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclasses.dataclass(frozen=True)
class FolderDataset:
    """Decoded images ready for a torchvision-style model."""

    images: torch.Tensor      # n x 3 x side x side, float32, normalized
    labels: np.ndarray        # n int64
    class_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.images.shape[0]


def load_image_folder(root, side: int = 224) -> FolderDataset:
    """Decode a class-per-directory image folder.

    Images are resized to side x side with bilinear resampling, scaled
    to [0, 1], and normalized with the standard ImageNet statistics.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise DatasetError(
            f"{root}: need >= 2 class directories, found {len(class_dirs)}")
    arrays = []
    labels = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in _EXTENSIONS)
        if not files:
            raise DatasetError(f"{class_dir}: no images")
        for path in files:
            try:
                with Image.open(path) as img:
                    rgb = img.convert("RGB").resize(
                        (side, side), Image.BILINEAR)
            except OSError as e:
                raise DatasetError(f"cannot decode {path}: {e}") from e
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
            arrays.append((arr - _MEAN) / _STD)
            labels.append(label)
    stacked = np.stack(arrays).transpose(0, 3, 1, 2)
    return FolderDataset(images=torch.from_numpy(stacked),
                         labels=np.array(labels, dtype=np.int64),
                         class_names=tuple(d.name for d in class_dirs))
