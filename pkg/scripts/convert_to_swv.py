"""
Convert a numpy array dump of a CT series into an SWV1 volume.

DICOM and NIfTI are not read here. Export the series to .npy or .npz with
any reader first, keeping this mapping:

    DICOM   pixel * RescaleSlope + RescaleIntercept   -> Hounsfield units
            slices sorted by ImagePositionPatient z   -> axis 0 (depth)
            Rows, Columns                             -> axes 1, 2
            SliceThickness or z-gap, PixelSpacing     -> spacing (z, y, x) in mm
    NIfTI   data transposed from (x, y, z) to (z, y, x); scl_slope/scl_inter -> HU
            pixdim[3], pixdim[2], pixdim[1]           -> spacing (z, y, x)

Values are rounded and clipped to int16.
"""

import sys
from pathlib import Path

import click
import numpy as np
from loguru import logger

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.core.errors import SwinCTError
from src.extractors.volume_extractor import Volume, load_volume, save_volume
from src.utils.logger import setup_logging

INT16 = np.iinfo(np.int16)


def to_volume(volume_id: str, array: np.ndarray, spacing, slope: float = 1.0, intercept: float = 0.0) -> Volume:
    hu = np.rint(np.asarray(array, dtype=np.float64) * slope + intercept)
    clipped = int(np.count_nonzero((hu < INT16.min) | (hu > INT16.max)))
    if clipped:
        logger.warning(f"⚠️ {clipped} voxels outside the int16 range were clipped")
    return Volume(volume_id, np.clip(hu, INT16.min, INT16.max).astype(np.int16), spacing)


@click.command()
@click.argument('source', type=click.Path(exists=True, dir_okay=False))
@click.argument('target', type=click.Path(dir_okay=False))
@click.option('--spacing', default=None, help='z,y,x voxel spacing in mm (required for .npy).')
@click.option('--slope', type=float, default=1.0, help='Rescale slope to Hounsfield units.')
@click.option('--intercept', type=float, default=0.0, help='Rescale intercept to Hounsfield units.')
@click.option('--id', 'volume_id', default=None, help='Volume id (default: target file stem).')
def convert(source, target, spacing, slope, intercept, volume_id):
    """Write SOURCE (.npy, or .npz with 'voxels' and 'spacing') to TARGET as SWV1."""
    setup_logging(level="INFO")
    source, target = Path(source), Path(target)
    try:
        if source.suffix == ".npz":
            with np.load(source) as data:
                array = data["voxels"]
                file_spacing = tuple(data["spacing"]) if "spacing" in data else None
        else:
            array, file_spacing = np.load(source), None
        if spacing:
            file_spacing = tuple(float(s) for s in spacing.split(","))
        if file_spacing is None:
            raise click.UsageError("no spacing in the source; pass --spacing z,y,x")

        volume = to_volume(volume_id or target.name.split(".")[0], array, file_spacing, slope, intercept)
        save_volume(target, volume)
        check = load_volume(target)
        logger.success(f"✅ {target}: {check.shape} voxels, spacing {check.spacing}, "
                       f"HU range [{int(check.voxels.min())}, {int(check.voxels.max())}]")
    except SwinCTError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        sys.exit(e.exit_code)
    except (KeyError, ValueError) as e:
        logger.error(f"❌ Cannot read {source}: {e}")
        sys.exit(3)


if __name__ == "__main__":
    convert()
