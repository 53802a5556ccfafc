########################
# Datasets             #
########################

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from app.exceptions import DatasetError, ValidationError
from app.imaging import AugmentationSpec, ImagePair, augment, load_image
from app.validators import ImageValidator

SampleKey = Union[int, Tuple[int, int]]

QA_MANIFEST_COLUMNS = ("reference_path", "distorted_path", "mos")
MOS_RANGE = (1.0, 5.0)


def derive_generator(*keys: int) -> torch.Generator:
    """Return a torch generator seeded from a tuple of integers via numpy's SeedSequence."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & ((1 << 63) - 1))


def read_index(path: Union[str, Path]) -> List[str]:
    """
    Read an index manifest: one pair identifier per line.

    Blank lines and lines starting with '#' are ignored.

    Raises:
        DatasetError: If the manifest is missing.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Index manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip() and not line.strip().startswith("#")]


class PairedImageDataset(Dataset):
    """
    Directory of ``{id}_LR.png`` / ``{id}_HR.png`` pairs listed in an index manifest.

    Items are addressed either by a plain index (the full, unaugmented pair) or by an
    ``(epoch, index)`` key, in which case the augmentation rng is derived from
    ``(seed, epoch, index)``. The sample a key maps to therefore never depends on
    which loader worker produced it.
    """

    def __init__(
        self,
        root: Union[str, Path],
        index: Union[str, Path, Sequence[str]] = "train.txt",
        scale: int = 4,
        crop_size: Optional[int] = None,
        augment: bool = True,
        seed: int = 0,
        cache: bool = True,
    ):
        self.root = Path(root)
        if isinstance(index, (str, Path)):
            self.identifiers = read_index(self.root / index)
        else:
            self.identifiers = list(index)
        if not self.identifiers:
            raise DatasetError(f"Dataset at {self.root} is empty")
        self.scale = scale
        self.crop_size = crop_size
        self.augment = augment
        self.seed = seed
        self.cache = cache
        self._pairs: Dict[int, ImagePair] = {}
        logging.info(f"Dataset {self.root} with {len(self.identifiers)} pairs")

    def __len__(self) -> int:
        return len(self.identifiers)

    def pair(self, index: int) -> ImagePair:
        """
        Load the full pair at ``index``.

        Raises:
            ImageIOError: If either image cannot be read.
            ValidationError: If the pair violates the scale contract.
        """
        if index in self._pairs:
            return self._pairs[index]
        identifier = self.identifiers[index]
        pair = ImagePair(
            lr=load_image(self.root / f"{identifier}_LR.png"),
            hr=load_image(self.root / f"{identifier}_HR.png"),
            scale=self.scale,
            identifier=identifier,
        )
        if self.cache:
            self._pairs[index] = pair
        return pair

    def __getitem__(self, key: SampleKey) -> Tuple[torch.Tensor, torch.Tensor]:
        if isinstance(key, tuple):
            epoch, index = key
        else:
            epoch, index = 0, key
        pair = self.pair(index)
        generator = derive_generator(self.seed, 1, epoch, index)
        if self.augment:
            spec = AugmentationSpec.sample(generator, self.crop_size)
        else:
            spec = AugmentationSpec(crop_size=self.crop_size, crop_policy="center")
        pair = augment(pair, spec, generator)
        return pair.lr[0], pair.hr[0]


class EpochBatchSampler(Sampler):
    """
    Deterministic batch sampler over ``(epoch, index)`` keys.

    Batch ``k`` is a pure function of ``(seed, k)``: epoch ``k // batches_per_epoch``
    uses a permutation seeded from ``(seed, epoch)``. Starting at ``start_step``
    therefore reproduces the tail of an unbroken run exactly, which is what
    checkpoint resume relies on.
    """

    def __init__(self, size: int, batch_size: int, seed: int,
                 start_step: int = 0, total_steps: Optional[int] = None):
        if size < 1:
            raise DatasetError("Cannot sample from an empty dataset")
        if batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
        self.size = size
        self.batch_size = min(batch_size, size)
        self.seed = seed
        self.start_step = start_step
        self.total_steps = total_steps
        self.batches_per_epoch = size // self.batch_size
        self._permutations: Dict[int, torch.Tensor] = {}

    def _permutation(self, epoch: int) -> torch.Tensor:
        if epoch not in self._permutations:
            self._permutations = {epoch: torch.randperm(self.size, generator=derive_generator(self.seed, 0, epoch))}
        return self._permutations[epoch]

    def batch(self, step: int) -> List[Tuple[int, int]]:
        """Return the keys of batch ``step``."""
        epoch, position = divmod(step, self.batches_per_epoch)
        order = self._permutation(epoch)
        chunk = order[position * self.batch_size:(position + 1) * self.batch_size]
        return [(epoch, int(i)) for i in chunk]

    def __iter__(self) -> Iterator[List[Tuple[int, int]]]:
        step = self.start_step
        while self.total_steps is None or step < self.total_steps:
            yield self.batch(step)
            step += 1

    def __len__(self) -> int:
        if self.total_steps is None:
            raise TypeError("Unbounded sampler has no length")
        return max(0, self.total_steps - self.start_step)


def make_loader(dataset: PairedImageDataset, batch_size: int, seed: int,
                start_step: int = 0, total_steps: Optional[int] = None,
                num_workers: int = 0) -> DataLoader:
    """Build an ordered, prefetching loader whose batch sequence is fixed by ``seed``."""
    sampler = EpochBatchSampler(len(dataset), batch_size, seed, start_step, total_steps)
    return DataLoader(dataset, batch_sampler=sampler, num_workers=num_workers)


########################
# QA Corpus            #
########################

@dataclass(frozen=True)
class QARecord:
    """One row of a QA manifest: a reference image, a distorted version and its MOS."""

    reference: Path
    distorted: Path
    mos: float


def read_qa_manifest(path: Union[str, Path]) -> List[QARecord]:
    """
    Read a QA manifest CSV with columns reference_path, distorted_path, mos.

    Relative paths are resolved against the manifest's directory.

    Raises:
        DatasetError: If the file is missing, columns are absent or rows are malformed;
            ``rows`` lists the 1-based data row numbers at fault.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"QA manifest not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DatasetError(f"Could not parse QA manifest {path}: {e}") from e

    missing = [c for c in QA_MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetError(f"QA manifest {path} lacks columns: {', '.join(missing)}")

    records, bad_rows = [], []
    for row_number, row in enumerate(frame.itertuples(index=False), start=1):
        reference, distorted = row.reference_path.strip(), row.distorted_path.strip()
        try:
            mos = float(row.mos)
        except ValueError:
            bad_rows.append(row_number)
            continue
        if not reference or not distorted or not (MOS_RANGE[0] <= mos <= MOS_RANGE[1]):
            bad_rows.append(row_number)
            continue
        records.append(QARecord(path.parent / reference, path.parent / distorted, mos))

    if bad_rows:
        raise DatasetError(
            f"Malformed QA manifest rows (MOS must be in [1, 5]): {bad_rows}", rows=bad_rows
        )
    if not records:
        raise DatasetError(f"QA manifest {path} has no records")
    return records


def split_by_reference(records: Sequence[QARecord], seed: int,
                       ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)) -> Dict[str, List[QARecord]]:
    """
    Split records train/val/test so that no reference image spans two splits.

    Reference images are shuffled with ``seed`` and divided by ``ratios``.

    Raises:
        DatasetError: If any split ends up empty.
    """
    references = sorted({str(r.reference) for r in records})
    order = torch.randperm(len(references), generator=derive_generator(seed, 2)).tolist()
    shuffled = [references[i] for i in order]
    n_train = int(round(ratios[0] * len(shuffled)))
    n_val = int(round(ratios[1] * len(shuffled)))
    assignment = {}
    for position, reference in enumerate(shuffled):
        if position < n_train:
            assignment[reference] = "train"
        elif position < n_train + n_val:
            assignment[reference] = "val"
        else:
            assignment[reference] = "test"

    splits: Dict[str, List[QARecord]] = {"train": [], "val": [], "test": []}
    for record in records:
        splits[assignment[str(record.reference)]].append(record)
    for name, members in splits.items():
        if not members:
            raise DatasetError(f"QA split '{name}' is empty ({len(references)} reference images)")
    return splits


class QAPairDataset(Dataset):
    """Distorted/reference image pairs with their MOS, optionally randomly co-cropped."""

    def __init__(self, records: Sequence[QARecord], crop_size: Optional[int] = None,
                 seed: int = 0, cache: bool = True):
        if not records:
            raise DatasetError("QA dataset is empty")
        self.records = list(records)
        self.crop_size = crop_size
        self.seed = seed
        self.cache = cache
        self._images: Dict[Path, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.records)

    def _load(self, path: Path) -> torch.Tensor:
        if path in self._images:
            return self._images[path]
        image = load_image(path)
        if self.cache:
            self._images[path] = image
        return image

    def __getitem__(self, key: SampleKey) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        epoch, index = key if isinstance(key, tuple) else (0, key)
        record = self.records[index]
        distorted, reference = self._load(record.distorted), self._load(record.reference)
        ImageValidator.validate_same_shape(distorted, reference, ("distorted", "reference"))
        if self.crop_size is not None:
            pair = ImagePair(lr=distorted, hr=reference, scale=1, identifier=str(record.distorted))
            generator = derive_generator(self.seed, 3, epoch, index)
            pair = augment(pair, AugmentationSpec(crop_size=self.crop_size, crop_policy="random"), generator)
            distorted, reference = pair.lr, pair.hr
        return distorted[0], reference[0], torch.tensor(record.mos, dtype=torch.float32)


def kadid_to_manifest(kadid_root: Union[str, Path], out_csv: Union[str, Path]) -> pd.DataFrame:
    """
    Convert a KADID-10K directory (``dmos.csv`` + ``images/``) into a QA manifest.

    Args:
        kadid_root: Directory holding ``dmos.csv`` and ``images/``.
        out_csv: Manifest to write; image paths inside are absolute.

    Returns:
        pd.DataFrame: The manifest rows.

    Raises:
        DatasetError: If ``dmos.csv`` is missing or lacks the expected columns.
    """
    kadid_root, out_csv = Path(kadid_root), Path(out_csv)
    source = kadid_root / "dmos.csv"
    if not source.is_file():
        raise DatasetError(f"KADID-10K score file not found: {source}")
    frame = pd.read_csv(source)
    for column in ("dist_img", "ref_img", "dmos"):
        if column not in frame.columns:
            raise DatasetError(f"{source} lacks column '{column}'")

    out_csv.parent.mkdir(parents=True, exist_ok=True)
    images = (kadid_root / "images").resolve()
    manifest = pd.DataFrame({
        "reference_path": [str(images / name) for name in frame["ref_img"]],
        "distorted_path": [str(images / name) for name in frame["dist_img"]],
        "mos": frame["dmos"].astype(float),
    })
    manifest.to_csv(out_csv, index=False)
    logging.info(f"Wrote QA manifest with {len(manifest)} rows to {out_csv}")
    return manifest
