"""Blend two generators' fakes with GenMix and print the routing targets.

No training here. Prints the fingerprint energy in each generator's frequency
bin before and after blending, which falls off linearly with the mix weight.
"""

import numpy as np

from genlora.data import DEFAULT_GENERATORS, Sample, apply_fingerprint, genmix, make_real
from genlora.router import routing_target


def bin_energy(img, fy, fx):
    n = img.shape[-1]
    return float(np.abs(np.fft.fft2(img - img.mean(axis=(1, 2), keepdims=True))[:, fy % n, fx % n]).mean())


def main():
    checker, spectral = DEFAULT_GENERATORS["checker"], DEFAULT_GENERATORS["spectral"]
    a = Sample(apply_fingerprint(make_real(1), checker), 1, 1)
    b = Sample(apply_fingerprint(make_real(2), spectral), 1, 2)
    print("lambda  target(k=3)          checker bin  spectral bin")
    for lam in (1.0, 0.75, 0.5, 0.25, 0.0):
        mixed = genmix(a, b, lam)
        target, mask = routing_target(mixed, 3)
        print(f"{lam:6.2f}  {np.array2string(np.asarray(target), precision=2):20s} "
              f"{bin_energy(mixed.image, 16, 16):11.2f}  {bin_energy(mixed.image, *spectral.frequency):12.2f}")


if __name__ == "__main__":
    main()
