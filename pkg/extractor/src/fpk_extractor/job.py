"""Extraction jobs: folder-per-class dataset -> FPK1 feature pack.

Per class, images are taken in sorted filename order: the first N are
the support set (also re-listed as train-split queries, so the pack is
trainable by the consumer), the remainder become test-split queries.
Test images are therefore disjoint from the support set by
construction. Preprocessing is deterministic, so the same job always
produces a byte-identical pack.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ClassWithFewerThanNImages, EmptyDataset
from .fpk_writer import SPLIT_TEST, SPLIT_TRAIN, PackPayload, write_pack

_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass
class ExtractJob:
    """One dataset export."""

    root: str
    shots: int
    out_path: str
    template: str = "a photo of a {}"
    class_names: list = field(default_factory=list)  # empty: autodiscover

    def resolve_classes(self) -> list:
        if self.class_names:
            return list(self.class_names)
        names = sorted(
            entry for entry in os.listdir(self.root)
            if os.path.isdir(os.path.join(self.root, entry))
        )
        if not names:
            raise EmptyDataset(f"no class folders under {self.root!r}")
        return names


def _class_images(root: str, name: str) -> list:
    folder = os.path.join(root, name)
    if not os.path.isdir(folder):
        raise EmptyDataset(f"class folder missing: {folder!r}")
    files = sorted(
        fn for fn in os.listdir(folder)
        if os.path.splitext(fn)[1].lower() in _IMAGE_EXTENSIONS
    )
    return [os.path.join(folder, fn) for fn in files]


def extract(job: ExtractJob, backend) -> str:
    """Run ``job`` through ``backend`` and write the pack; returns the path."""
    classes = job.resolve_classes()
    h, w, c, c_t = backend.dims

    support_arrays = []
    query_maps, query_globals, labels, splits = [], [], [], []
    for ci, name in enumerate(classes):
        paths = _class_images(job.root, name)
        if len(paths) < job.shots:
            raise ClassWithFewerThanNImages(
                f"class {name!r} has {len(paths)} images, needs {job.shots}"
            )
        support_paths = paths[: job.shots]
        test_paths = paths[job.shots:]

        maps = []
        for path in support_paths:
            with Image.open(path) as img:
                feature_map = backend.image_map(img)
                global_feature = backend.image_global(img)
            maps.append(feature_map)
            query_maps.append(feature_map)
            query_globals.append(global_feature)
            labels.append(ci)
            splits.append(SPLIT_TRAIN)
        support_arrays.append(np.stack(maps))

        for path in test_paths:
            with Image.open(path) as img:
                query_maps.append(backend.image_map(img))
                query_globals.append(backend.image_global(img))
            labels.append(ci)
            splits.append(SPLIT_TEST)

    prompts = [job.template.format(name) for name in classes]
    text = backend.text_features(prompts)

    payload = PackPayload(
        class_names=classes,
        prompt_template=job.template,
        tau=backend.tau,
        dims=(h, w, c, c_t),
        normalize_locations=True,
        text_features=text,
        support=support_arrays,
        query_maps=(np.stack(query_maps) if query_maps
                    else np.zeros((0, h * w, c))),
        query_globals=(np.stack(query_globals) if query_globals
                       else np.zeros((0, c_t))),
        labels=np.array(labels, dtype=np.uint32),
        splits=np.array(splits, dtype=np.uint32),
    )
    write_pack(payload, job.out_path)
    return job.out_path
