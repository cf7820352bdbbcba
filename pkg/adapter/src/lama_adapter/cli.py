"""Serve a case directory of image/mask pairs with in-painted results.

Protocol: the directory holds `item_NNN_image.png` and `item_NNN_mask.png`
(8-bit grayscale; mask 0/255) and the adapter writes
`item_NNN_result.png` with the same dimensions.  Unmasked pixels are
copied back from the source verbatim after inference, so mask fidelity is
exact even when a neural decoder re-encodes the whole frame.

Exit codes: 0 all items served, 3 some items failed (each named on
stderr), 4 checkpoint failed to load.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

EXIT_OK = 0
EXIT_ITEMS_FAILED = 3
EXIT_CHECKPOINT = 4

STUB_MODES = ("mean-fill",)

_ITEM_RE = re.compile(r"^item_(\d{3})_image\.png$")


@dataclass
class AdapterConfig:
    case_dir: Path
    checkpoint: Path | None = None
    stub: str | None = None
    device: str = "cpu"


def _load_gray(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def _save_gray(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array.astype(np.uint8), mode="L").save(path)


def _boundary_ring(mask: np.ndarray) -> np.ndarray:
    """Unmasked pixels 8-adjacent to the mask, via pure-numpy shifts."""
    grown = mask.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            shifted = np.zeros_like(mask)
            ys = slice(max(0, dy), mask.shape[0] + min(0, dy))
            xs = slice(max(0, dx), mask.shape[1] + min(0, dx))
            ys_src = slice(max(0, -dy), mask.shape[0] + min(0, -dy))
            xs_src = slice(max(0, -dx), mask.shape[1] + min(0, -dx))
            shifted[ys, xs] = mask[ys_src, xs_src]
            grown |= shifted
    return grown & ~mask


def mean_fill(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill the mask with the mean intensity of its boundary ring."""
    ring = _boundary_ring(mask)
    value = int(round(float(image[ring].mean()))) if ring.any() else 0
    out = image.copy()
    out[mask] = value
    return out


class CheckpointRunner:
    """TorchScript checkpoint wrapper; imports torch lazily.

    The module is expected to take (image [1,3,H,W] in 0..1, mask
    [1,1,H,W] with 1 marking holes) and return [1,3,H,W]; outputs scaled
    to 0..1 are rescaled to gray levels.  Images pass through unscaled.
    """

    def __init__(self, checkpoint: Path, device: str):
        import torch  # deferred: stub mode must not need it

        self._torch = torch
        self.device = device
        self.model = torch.jit.load(str(checkpoint), map_location=device)
        self.model.eval()

    def __call__(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            rgb = np.repeat(image[None, None, :, :], 3, axis=1).astype(np.float32) / 255.0
            hole = mask[None, None, :, :].astype(np.float32)
            out = self.model(torch.from_numpy(rgb).to(self.device),
                             torch.from_numpy(hole).to(self.device))
            arr = out.detach().cpu().numpy()[0]
        gray = arr.mean(axis=0)
        if gray.max() <= 1.5:
            gray = gray * 255.0
        return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def serve_case_dir(config: AdapterConfig) -> int:
    """Write a result for every image/mask pair in the case directory."""
    case_dir = Path(config.case_dir)
    if not case_dir.is_dir():
        print(f"case directory not found: {case_dir}", file=sys.stderr)
        return EXIT_ITEMS_FAILED
    indices = sorted(
        int(m.group(1)) for p in case_dir.iterdir() if (m := _ITEM_RE.match(p.name))
    )
    if not indices:
        print(f"no item_NNN_image.png files in {case_dir}", file=sys.stderr)
        return EXIT_ITEMS_FAILED

    meta = {"mode": "stub:" + config.stub if config.stub else "checkpoint", "items": len(indices)}
    if config.checkpoint is not None:
        try:
            runner = CheckpointRunner(config.checkpoint, config.device)
        except Exception as exc:
            print(f"checkpoint load failed: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT
        meta["checkpoint"] = str(config.checkpoint)
        meta["checkpoint_sha256"] = hashlib.sha256(
            Path(config.checkpoint).read_bytes()
        ).hexdigest()
        meta["device"] = config.device
        infer = runner
    else:
        infer = mean_fill

    failures: list[tuple[int, str]] = []
    for idx in indices:
        try:
            image = _load_gray(case_dir / f"item_{idx:03d}_image.png")
            mask_path = case_dir / f"item_{idx:03d}_mask.png"
            if not mask_path.exists():
                raise FileNotFoundError(f"mask file missing: {mask_path.name}")
            mask = _load_gray(mask_path) > 127
            if mask.shape != image.shape:
                raise ValueError("mask dimensions differ from image")
            result = infer(image, mask)
            if result.shape != image.shape:
                raise ValueError("model returned mismatched dimensions")
            # exact mask fidelity regardless of what inference produced
            result = result.copy()
            result[~mask] = image[~mask]
            _save_gray(case_dir / f"item_{idx:03d}_result.png", result)
        except Exception as exc:
            failures.append((idx, str(exc)))
    (case_dir / "adapter_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if failures:
        for idx, reason in failures:
            print(f"item {idx} failed: {reason}", file=sys.stderr)
        print(
            "unprocessed items: " + ", ".join(str(idx) for idx, _ in failures),
            file=sys.stderr,
        )
        return EXIT_ITEMS_FAILED
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lama-adapter",
        description="Fill a case directory of masked images via a checkpoint or stub",
    )
    parser.add_argument("case_dir", help="directory of item_NNN_image.png / _mask.png pairs")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="TorchScript in-painting checkpoint path")
    group.add_argument("--stub", choices=STUB_MODES, help="dependency-free fill mode")
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)
    config = AdapterConfig(
        case_dir=Path(args.case_dir),
        checkpoint=Path(args.checkpoint) if args.checkpoint else None,
        stub=args.stub,
        device=args.device,
    )
    return serve_case_dir(config)


if __name__ == "__main__":
    sys.exit(main())
