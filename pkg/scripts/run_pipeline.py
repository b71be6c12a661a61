"""Run every stage on the bundled fixtures and time it.

transfer -> calibrate -> color train + correct -> compose -> face train + drive

    python3 scripts/run_pipeline.py [--out pipeline-out] [--seed 0]
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from rigforge.cli import main as rigforge

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def stages(out: Path, seed: int):
    f = FIXTURES
    s = ["--seed", str(seed)]
    return [
        ("transfer", ["transfer", "--config", str(f / "transfer/config.json"), "--out", str(out / "transfer"), *s]),
        ("calibrate", ["calibrate", "--config", str(f / "calibrate/config.json"), "--out", str(out / "calibrate"), *s]),
        ("color train", ["color", "train", "--config", str(f / "color/train.json"), "--out", str(out / "color"), *s]),
        ("color correct", ["color", "correct", "--config", str(f / "color/correct.json"), "--out", str(out / "color"),
                           f"model={json.dumps(str(out / 'color/color_model.json'))}", *s]),
        ("compose", ["compose", "--config", str(f / "compose/config.json"), "--out", str(out / "compose"), *s]),
        ("face train", ["face", "train", "--config", str(f / "face/train.json"), "--out", str(out / "face"), *s]),
        ("face drive", ["face", "drive", "--config", str(f / "face/drive.json"), "--out", str(out / "face"),
                        f"model={json.dumps(str(out / 'face/face_model.json'))}", *s]),
    ]


def run(out: Path, seed: int = 0) -> dict:
    timings = {}
    start = time.perf_counter()
    for name, argv in stages(out, seed):
        t0 = time.perf_counter()
        code = rigforge(argv)
        timings[name] = round(time.perf_counter() - t0, 3)
        if code != 0:
            return {"ok": False, "failed": name, "exit_code": code, "timings": timings}
    return {"ok": True, "timings": timings, "total_seconds": round(time.perf_counter() - start, 3)}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("pipeline-out"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    summary = run(args.out, args.seed)
    print(json.dumps(summary, indent=1))
    return 0 if summary["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
