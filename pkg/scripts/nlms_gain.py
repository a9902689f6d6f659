"""NLMS noise-cancellation gain versus interference SNR and leak gain."""

import argparse

import numpy as np

from patchkeeper.analysis import cancel_noise
from patchkeeper.core import PhysioProfile
from patchkeeper.simulator import leak_scenario


def gain_db(snr_db: float, leak: float, seed: int, duration: float, rate: int) -> float:
    clean, ambient, steth = leak_scenario(PhysioProfile(), rate, duration, seed, snr_db=snr_db, leak_gain=leak)
    out = cancel_noise(steth, ambient)
    tail = slice(rate, None)  # skip the first second of adaptation
    before = np.mean((steth.samples - clean.samples)[tail] ** 2)
    after = np.mean((out.samples - clean.samples)[tail] ** 2)
    return 10 * np.log10(before / after)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--snr", default="-10,-5,0,5,10")
    ap.add_argument("--leak", default="0.1,0.5,1.0")
    ap.add_argument("--duration", type=float, default=10.0)
    ap.add_argument("--rate", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    leaks = [float(x) for x in args.leak.split(",")]
    print("snr_db\t" + "\t".join(f"leak_{g:g}" for g in leaks))
    for snr in (float(x) for x in args.snr.split(",")):
        row = [gain_db(snr, g, args.seed, args.duration, args.rate) for g in leaks]
        print(f"{snr:g}\t" + "\t".join(f"{v:.2f}" for v in row))


if __name__ == "__main__":
    main()
