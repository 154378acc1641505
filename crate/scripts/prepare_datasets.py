#!/usr/bin/env python3
"""Extract the benchmark datasets used by the acceptance suite into data/.

The UCI datasets are taken from the KEEL copies bundled in the `keel_ds`
wheel (fetch it with `pip download --no-deps keel-ds==0.2.5`). Every output
file is comma separated with the +1/-1 label in the first column.
"""
import argparse
import pathlib
import zipfile

CAR_LEVELS = {
    0: ["low", "med", "high", "vhigh"],
    1: ["low", "med", "high", "vhigh"],
    2: ["2", "3", "4", "5more"],
    3: ["2", "4", "more"],
    4: ["small", "med", "big"],
    5: ["low", "med", "high"],
}

# (output name, file inside the wheel, positive-class rule)
SOURCES = [
    ("heart", "balanced/raw/heart.dat", lambda lab: lab == "2"),
    ("thyroid", "imbalanced/raw/new-thyroid1.dat", lambda lab: lab == "positive"),
    ("ecoli5", "imbalanced/raw/ecoli4.dat", lambda lab: lab == "positive"),
    ("yeast7", "imbalanced/raw/yeast6.dat", lambda lab: lab == "positive"),
    ("car3", "imbalanced/raw/car-good.dat", lambda lab: lab == "positive"),
]


def encode(name, fields):
    if name == "car3":
        return [str(CAR_LEVELS[k].index(v)) for k, v in enumerate(fields)]
    return [repr(float(v)) if "." in v else str(int(v)) for v in fields]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("wheel", help="path to keel_ds-0.2.5-py3-none-any.whl")
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wheel = zipfile.ZipFile(args.wheel)
    for name, member, is_pos in SOURCES:
        text = wheel.read("keel_ds/data/" + member).decode()
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("@"):
                continue
            fields = [f.strip() for f in line.split(",")]
            label = "1" if is_pos(fields[-1]) else "-1"
            rows.append(",".join([label] + encode(name, fields[:-1])))
        (out / f"{name}.csv").write_text("\n".join(rows) + "\n")
        npos = sum(r.startswith("1,") for r in rows)
        print(f"{name}: n={len(rows)} positives={npos}")


if __name__ == "__main__":
    main()
