"""
Shared utility functions for mrfei.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np
from platformdirs import user_cache_dir, user_config_dir
from rich.console import Console
from rich.logging import RichHandler

BUNDLE_VERSION = 1


class BundleError(Exception):
    """Exception raised for malformed binary bundles."""

    def __init__(self, message: str, path: Path | None = None):
        self.message = message
        self.path = path
        super().__init__(self.message)


def format_duration(seconds: float) -> str:
    """Format duration to human-readable string."""
    if seconds < 1:
        return f"{seconds:.1f}s"
    if seconds < 60:
        return f"{int(seconds)}s"
    if seconds < 3600:
        mins = int(seconds // 60)
        secs = int(seconds % 60)
        return f"{mins}m {secs}s"
    hours = int(seconds // 3600)
    mins = int((seconds % 3600) // 60)
    return f"{hours}h {mins}m"


def compute_hash(filepath: Path, algorithm: str = "sha256", chunk_size: int = 8192) -> str:
    """Compute hash of a file using specified algorithm."""
    hash_func = hashlib.new(algorithm)

    with open(filepath, "rb") as f:
        while chunk := f.read(chunk_size):
            hash_func.update(chunk)

    return hash_func.hexdigest()


def hash_arrays(*arrays: np.ndarray, extra: str = "") -> str:
    """
    Content hash of one or more arrays.

    Shapes and dtypes take part in the digest, so a reshaped copy hashes differently.
    """
    hash_func = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(arr)
        hash_func.update(f"{a.dtype.str}{a.shape}".encode())
        hash_func.update(a.tobytes())
    hash_func.update(extra.encode())
    return hash_func.hexdigest()


def short_hash(digest: str, length: int = 12) -> str:
    """Shorten a hex digest for file names and display."""
    return digest[:length]


def get_config_dir() -> Path:
    """Get user config directory."""
    return Path(user_config_dir("mrfei"))


def get_cache_dir() -> Path:
    """Get user cache directory."""
    return Path(os.environ.get("MRFEI_CACHE_DIR") or user_cache_dir("mrfei"))


def ensure_dirs() -> None:
    """Ensure config and cache directories exist."""
    get_config_dir().mkdir(parents=True, exist_ok=True)
    get_cache_dir().mkdir(parents=True, exist_ok=True)


def load_json_file(filepath: Path) -> Any:
    """Load JSON from file."""
    with open(filepath, encoding="utf-8") as f:
        return json.load(f)


def save_json_file(filepath: Path, data: Any) -> None:
    """Save data to JSON file."""
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, default=str)


def is_running_in_ci() -> bool:
    """Check if running in CI environment."""
    ci_env_vars = ["CI", "GITHUB_ACTIONS", "GITLAB_CI", "TRAVIS", "CIRCLECI"]
    return any(os.getenv(var) for var in ci_env_vars)


def is_interactive() -> bool:
    """Check if running in interactive terminal."""
    return sys.stdin.isatty() and not is_running_in_ci()


def safe_filename(filename: str) -> str:
    """Sanitize filename to be safe for filesystem."""
    unsafe_chars = '<>:"/\\|?* '
    for char in unsafe_chars:
        filename = filename.replace(char, "_")
    filename = "".join(c for c in filename if ord(c) >= 32)
    return filename.strip("._")


def setup_logging(verbose: bool = False, quiet: bool = False, console: Console | None = None) -> None:
    """Route the ``mrfei`` logger through a rich handler."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logger = logging.getLogger("mrfei")
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=verbose,
        rich_tracebacks=verbose,
    )
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    logger.addHandler(handler)
    logger.propagate = False


def save_bundle(
    stem: Path,
    arrays: dict[str, np.ndarray],
    meta: dict[str, Any] | None = None,
) -> Path:
    """
    Write named arrays as one little-endian float64 blob plus a JSON manifest.

    Complex arrays are stored as interleaved (real, imag) pairs. Integer and boolean
    arrays are stored as float64 and restored to their dtype on load.

    Args:
        stem: Output path without suffix; writes ``<stem>.bin`` and ``<stem>.json``
        arrays: Arrays in declaration order
        meta: Extra JSON-serialisable manifest fields

    Returns:
        Path of the manifest
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as f:
        for name, arr in arrays.items():
            a = np.asarray(arr)
            if np.iscomplexobj(a):
                kind = "complex"
                flat = np.ascontiguousarray(a, dtype="<c16").view("<f8").ravel()
            else:
                kind = "bool" if a.dtype == np.bool_ else "int" if a.dtype.kind in "iu" else "float"
                flat = np.ascontiguousarray(a, dtype="<f8").ravel()
            f.write(flat.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "kind": kind})
            offset += flat.size

    manifest = {"version": BUNDLE_VERSION, "arrays": entries, "count": offset, **(meta or {})}
    manifest_path = stem.with_suffix(".json")
    save_json_file(manifest_path, manifest)
    return manifest_path


def load_bundle(stem: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a bundle written by :func:`save_bundle`."""
    stem = Path(stem)
    manifest_path = stem.with_suffix(".json")
    if not manifest_path.exists():
        raise BundleError(f"Manifest not found: {manifest_path}", manifest_path)

    manifest = load_json_file(manifest_path)
    blob = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    if blob.size != manifest.get("count"):
        raise BundleError(
            f"Bundle size mismatch: manifest says {manifest.get('count')}, found {blob.size}",
            manifest_path,
        )

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        if entry["kind"] == "complex":
            flat = blob[entry["offset"] : entry["offset"] + 2 * size]
            arrays[entry["name"]] = flat.view("<c16").astype(np.complex128).reshape(shape)
            continue
        flat = blob[entry["offset"] : entry["offset"] + size].astype(np.float64)
        if entry["kind"] == "bool":
            arrays[entry["name"]] = flat.reshape(shape) != 0
        elif entry["kind"] == "int":
            arrays[entry["name"]] = flat.reshape(shape).astype(np.int64)
        else:
            arrays[entry["name"]] = flat.reshape(shape)
    return arrays, manifest


def write_pgm(path: Path, image: np.ndarray, vmin: float, vmax: float) -> None:
    """Write a 2-D image as a 16-bit binary PGM scaled from [vmin, vmax]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM output needs a 2-D image, got shape {img.shape}")
    span = vmax - vmin if vmax > vmin else 1.0
    scaled = np.clip((img - vmin) / span, 0.0, 1.0)
    pixels = np.round(scaled * 65535).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(pixels.tobytes())
