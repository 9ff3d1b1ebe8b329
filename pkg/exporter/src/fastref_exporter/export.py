"""Walk an image folder, run a torchvision backbone, emit FTZ feature tensors
plus the JSON-lines manifest the refinement pipeline consumes.

Directory layout follows the MVTec convention:

    <input>/train/good/*.png          -> label 0
    <input>/test/good/*.png           -> label 0
    <input>/test/<defect>/*.png       -> label 1, mask looked up under
    <input>/ground_truth/<defect>/<stem>_mask.png

Anything that does not match the convention is exported with label 0 and no
mask.  Masks are resized to the working resolution and written as rank-2 FTZ
(0/1 floats) so the evaluator can consume them directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.models import get_model
from torchvision.models.feature_extraction import create_feature_extractor

log = logging.getLogger("fastref_exporter")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

# ImageNet statistics, the convention for every torchvision backbone
_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)


@dataclass(frozen=True)
class ExportSpec:
    input_dir: str
    output_dir: str
    backbone: str = "wide_resnet50_2"
    layers: tuple[str, ...] = ("layer2", "layer3")
    resolution: int = 256
    weights: str = "none"  # "none" = seeded random init, "default" = hub weights
    seed: int = 0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not self.layers:
            raise ValueError("need at least one layer to extract")
        if self.weights not in ("none", "default"):
            raise ValueError("weights must be 'none' or 'default'")


def build_extractor(spec: ExportSpec) -> torch.nn.Module:
    """Resolve the backbone by name and wrap the requested layer outputs."""
    torch.manual_seed(spec.seed)
    weights = "DEFAULT" if spec.weights == "default" else None
    try:
        model = get_model(spec.backbone, weights=weights)
    except Exception as exc:
        raise RuntimeError(f"cannot resolve backbone {spec.backbone!r}: {exc}") from exc
    try:
        extractor = create_feature_extractor(model, return_nodes=list(spec.layers))
    except Exception as exc:
        raise RuntimeError(
            f"backbone {spec.backbone!r} has no nodes {list(spec.layers)}: {exc}"
        ) from exc
    extractor.eval()
    return extractor


def list_images(input_dir: Path) -> list[Path]:
    return sorted(
        p for p in input_dir.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        and "ground_truth" not in p.parts
    )


def infer_label_and_mask(image: Path, input_dir: Path) -> tuple[int, Path | None]:
    rel = image.relative_to(input_dir)
    parts = rel.parts
    if len(parts) >= 3 and parts[0] == "test" and parts[1] != "good":
        mask = input_dir / "ground_truth" / parts[1] / f"{image.stem}_mask{image.suffix}"
        if not mask.exists():
            candidates = list((input_dir / "ground_truth" / parts[1]).glob(f"{image.stem}*"))
            mask = candidates[0] if candidates else None
        return 1, mask
    return 0, None


def _load_image(path: Path, resolution: int) -> torch.Tensor:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    tensor = torch.from_numpy(arr).permute(2, 0, 1)
    return ((tensor - _MEAN) / _STD).unsqueeze(0)


def _features_for(extractor: torch.nn.Module, batch: torch.Tensor) -> np.ndarray:
    """Concatenate the selected layer maps on a common grid: deeper layers are
    bilinearly upsampled to the first layer's resolution."""
    with torch.no_grad():
        outputs = extractor(batch)
    maps = list(outputs.values())
    h, w = maps[0].shape[-2:]
    fused = [
        m if m.shape[-2:] == (h, w)
        else torch.nn.functional.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)
        for m in maps
    ]
    stacked = torch.cat(fused, dim=1)[0]  # c x h x w
    return stacked.permute(1, 2, 0).contiguous().numpy().astype(np.float32)


def _export_mask(mask_path: Path, resolution: int, out_path: Path) -> None:
    from .ftz import write_ftz

    with Image.open(mask_path) as img:
        resized = img.convert("L").resize((resolution, resolution), Image.NEAREST)
    arr = (np.asarray(resized, dtype=np.float32) > 0).astype(np.float32)
    write_ftz(arr, out_path)


def export_features(spec: ExportSpec) -> Path:
    """Export every image under spec.input_dir; returns the manifest path.

    Per-file failures are logged and skipped; the run fails (RuntimeError)
    only if images were found and none could be exported.
    """
    from .ftz import write_ftz

    input_dir = Path(spec.input_dir)
    if not input_dir.is_dir():
        raise RuntimeError(f"input dir {input_dir} does not exist")
    out_dir = Path(spec.output_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    images = list_images(input_dir)
    manifest_path = out_dir / "manifest.jsonl"
    if not images:
        log.warning("no images under %s; writing an empty manifest", input_dir)
        manifest_path.write_text("")
        return manifest_path

    extractor = build_extractor(spec)
    records: list[dict] = []
    failures = 0
    for idx, image in enumerate(images):
        try:
            batch = _load_image(image, spec.resolution)
            feats = _features_for(extractor, batch)
            tensor_rel = f"tensors/{idx:05d}_{image.stem}.ftz"
            write_ftz(feats, out_dir / tensor_rel)
            label, mask = infer_label_and_mask(image, input_dir)
            mask_rel = None
            if mask is not None and mask.exists():
                mask_rel = f"masks/{idx:05d}_{image.stem}_mask.ftz"
                _export_mask(mask, spec.resolution, out_dir / mask_rel)
            records.append(
                {
                    "tensor": tensor_rel,
                    "label": label,
                    "mask": mask_rel,
                    "image_hw": [spec.resolution, spec.resolution],
                }
            )
        except Exception as exc:  # noqa: BLE001 - per-file resilience is the contract
            failures += 1
            log.error("failed to export %s: %s", image, exc)
    if not records:
        raise RuntimeError(f"all {failures} images under {input_dir} failed to export")
    if failures:
        log.warning("exported %d images, %d failed", len(records), failures)
    manifest_path.write_text(
        "\n".join(json.dumps(rec, sort_keys=True) for rec in records) + "\n"
    )
    return manifest_path
