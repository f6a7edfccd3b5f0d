"""Reference EXTERNAL predictor speaking the file protocol.

    python -m petfuse.external_threshold <uuid> <workdir> [--t 2.5]

Reads ``<workdir>/<uuid>_pet.nii.gz`` and writes the sigmoid of the PET
around ``t`` to ``<workdir>/<uuid>_prob.nii.gz``. Handy for smoke-testing the
protocol and as a template for wrapping a real model.
"""
import argparse
import os
import sys

import numpy as np

from .nifti import read_nifti, write_nifti
from .volume import Kind


def main(argv=None):
    parser = argparse.ArgumentParser(prog="petfuse-external-threshold")
    parser.add_argument("uuid")
    parser.add_argument("workdir")
    parser.add_argument("--t", type=float, default=2.5)
    args = parser.parse_args(argv)

    pet = read_nifti(os.path.join(args.workdir, f"{args.uuid}_pet.nii.gz"), kind=Kind.PET)
    x = (pet.data.astype(np.float64) - args.t) / 0.5
    prob = 0.5 * (1.0 + np.tanh(0.5 * x))
    write_nifti(pet.with_data(prob, kind=Kind.PROBABILITY),
                os.path.join(args.workdir, f"{args.uuid}_prob.nii.gz"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
