"""Volume ingestion, slice preprocessing, pairing and the ULSB bundle format."""
from .bundle import BundleError, DatasetBundle, SliceRecord, build_index, crc32c, decode_bundle, encode_bundle, read_bundle, write_bundle
from .imaging import decode_png, encode_png, extract_slices, lanczos_kernel, normalize_slice, overlay, resize_label, resize_lanczos
from .nifti import NiftiError, VolumeRecord, read_volume, write_volume
from .pairing import PairingError, PairingResult, identifier, pair_by_identifier, patient_of
from .preprocess import PreprocessSummary, preprocess_dirs
from .synth import synth_dataset
