"""Heart-rate error of the ECG and PPG estimators across rate, jitter and seeds."""

import argparse

import numpy as np

from patchkeeper import analysis
from patchkeeper.core import PhysioProfile, SensorConfig
from patchkeeper.simulator import generate_session


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rates", default="40,50,60,72,90,120,150,180")
    ap.add_argument("--jitter", type=float, default=0.05)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--duration", type=float, default=60.0)
    args = ap.parse_args()

    cfg = SensorConfig().with_disabled("imu", "audio")
    print("hr_bpm\tecg_max_err\tppg_max_err\tppg_failures")
    for hr in (float(x) for x in args.rates.split(",")):
        ecg_err, ppg_err, fails = [], [], 0
        for seed in range(args.seeds):
            profile = PhysioProfile(heart_rate_bpm=hr, hr_variability_frac=args.jitter)
            log, truth = generate_session(profile, args.duration, cfg, seed)
            bpm, _ = analysis.heart_rate(analysis.detect_r_peaks(analysis.session_series(log, "ecg")))
            ecg_err.append(abs(bpm - truth.mean_hr_bpm))
            try:
                est = analysis.ppg_heart_rate(analysis.session_series(log, "ppg_green"))
                ppg_err.append(abs(est.rate_per_min - truth.mean_hr_bpm))
            except analysis.NoSpectralPeak:
                fails += 1
        ppg = f"{max(ppg_err):.3f}" if ppg_err else "nan"
        print(f"{hr:.0f}\t{max(ecg_err):.3f}\t{ppg}\t{fails}")


if __name__ == "__main__":
    main()
