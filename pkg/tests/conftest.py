import numpy as np

from lungood.volume import Patch


def hu_patch(arr, pid="p0") -> Patch:
    """Wrap a (p,p,p) or (c,p,p,p) array as a Patch with neutral metadata."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    return Patch(
        data=arr,
        origin=(0, 0, 0),
        mask_coverage=1.0,
        emphysema_fraction=0.0,
        patient_id=pid,
    )
