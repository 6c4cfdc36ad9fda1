"""On-disk artifacts: JSON documents, append-only reports, HDF5 analysis dumps and PNG images."""
import json
import logging
import os
from typing import Any, Dict, Optional, Sequence, Tuple

import h5py
import numpy as np
from PIL import Image

from optical_signature import config

logger = logging.getLogger(__name__)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, bytes):
        return value.hex()
    return value


def write_json(path: str, doc: Dict[str, Any]) -> str:
    doc = dict(doc)
    doc.setdefault("schema_version", config.SCHEMA_VERSION)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(doc), f, indent=2)
    return path


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def next_free_path(out_dir: str, stem: str, ext: str = ".json") -> str:
    """out_dir/stem.ext, or stem-N.ext with the smallest N >= 1 that does not exist yet."""
    path = os.path.join(out_dir, stem + ext)
    n = 1
    while os.path.exists(path):
        path = os.path.join(out_dir, f"{stem}-{n}{ext}")
        n += 1
    return path


def free_suffix(out_dir: str, names: Sequence[Tuple[str, str]]) -> str:
    """Empty or "-N": the first suffix for which no out_dir/stem+suffix+ext in names exists."""
    n = 0
    while True:
        suffix = f"-{n}" if n else ""
        if not any(os.path.exists(os.path.join(out_dir, stem + suffix + ext)) for stem, ext in names):
            return suffix
        n += 1


def write_json_append_only(out_dir: str, stem: str, doc: Dict[str, Any]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = next_free_path(out_dir, stem)
    if not path.endswith(stem + ".json"):
        logger.info("%s.json exists, writing %s", stem, os.path.basename(path))
    return write_json(path, doc)


def write_text(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


################################################################################################
#                                   HDF5                                                      #
################################################################################################
def save_analysis(path: str, data: Dict[str, Any]):
    """Writes nested dicts of arrays as groups and datasets."""
    def write(group, items):
        for key, value in items.items():
            if isinstance(value, dict):
                write(group.create_group(key), value)
            else:
                group.create_dataset(key, data=np.asarray(value))

    with h5py.File(path, "w") as f:
        f.attrs["schema_version"] = config.SCHEMA_VERSION
        write(f, data)


def get_hdf5_length(hdf5_file, keys_to_ignore=()) -> Optional[int]:
    """Shared leading length of every dataset below hdf5_file, None when empty."""
    length = None
    for key in hdf5_file.keys():
        if key in keys_to_ignore:
            continue
        curr_data = hdf5_file[key]
        if isinstance(curr_data, h5py.Group):
            curr_length = get_hdf5_length(curr_data, keys_to_ignore=keys_to_ignore)
        elif isinstance(curr_data, h5py.Dataset):
            curr_length = len(curr_data) if curr_data.shape else None
        else:
            raise ValueError(f"Unexpected HDF5 node {key}")
        if length is None:
            length = curr_length
        elif curr_length is not None and curr_length != length:
            return None
    return length


def load_hdf5_to_dict(hdf5_file, keys_to_ignore=()) -> Dict[str, Any]:
    data_dict = {}
    for key in hdf5_file.keys():
        if key in keys_to_ignore:
            continue
        curr_data = hdf5_file[key]
        if isinstance(curr_data, h5py.Group):
            data_dict[key] = load_hdf5_to_dict(curr_data, keys_to_ignore=keys_to_ignore)
        elif isinstance(curr_data, h5py.Dataset):
            data_dict[key] = curr_data[()]
        else:
            raise ValueError(f"Unexpected HDF5 node {key}")
    return data_dict


def load_analysis(path: str) -> Dict[str, Any]:
    with h5py.File(path, "r") as f:
        return load_hdf5_to_dict(f)


################################################################################################
#                                   Images                                                    #
################################################################################################
def heatmap_image(values: np.ndarray) -> np.ndarray:
    """log1p-scaled 8-bit grayscale rendering of a heatmap."""
    scaled = np.log1p(np.maximum(np.asarray(values, dtype=np.float64), 0.0))
    peak = scaled.max()
    if peak > 0:
        scaled = scaled / peak
    return np.round(scaled * 255).astype(np.uint8)


def save_heatmap_png(path: str, values: np.ndarray) -> str:
    Image.fromarray(heatmap_image(values)).save(path)
    return path
