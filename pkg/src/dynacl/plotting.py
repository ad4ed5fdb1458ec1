"""Static figures for a run directory (headless backend)."""
import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def plot_training(records: list[dict], path) -> Path:
    """Loss, strength and loss coefficients against epoch."""
    recs = [r for r in records if "epoch" in r and "loss" in r]
    ep = [r["epoch"] for r in recs]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax0.plot(ep, [r["loss"] for r in recs], label="total")
    ax0.plot(ep, [r["nce"] for r in recs], label="clean NCE")
    ax0.plot(ep, [r["adv_nce"] for r in recs], label="adversarial NCE")
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("loss")
    ax0.legend()
    ax1.step(ep, [r["strength"] for r in recs], where="post", label="strength")
    ax1.step(ep, [r["clean_coef"] for r in recs], where="post", label="clean coef")
    ax1.step(ep, [r["adv_coef"] for r in recs], where="post", label="adv coef")
    ax1.set_xlabel("epoch")
    ax1.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(csv_path, path) -> Path:
    """MMD and minimal classwise distance against augmentation strength."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    s = [float(r["strength"]) for r in rows]
    fig, ax0 = plt.subplots(figsize=(5, 3.5))
    if any(r["mmd_mean"] for r in rows):
        ax0.plot(s, [float(r["mmd_mean"] or "nan") for r in rows], "o-", color="C0")
        ax0.set_ylabel("MMD", color="C0")
    if any(r["classwise_min"] for r in rows):
        ax1 = ax0.twinx()
        ax1.plot(s, [float(r["classwise_min"] or "nan") for r in rows], "s--", color="C1")
        ax1.axhline(16 / 255, color="C1", lw=0.8, ls=":")
        ax1.set_ylabel("min classwise L-inf", color="C1")
    ax0.set_xlabel("augmentation strength")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_run(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    out = []
    recs = read_jsonl(run_dir / "metrics.jsonl")
    if any("loss" in r for r in recs):
        out.append(plot_training(recs, run_dir / "training.png"))
    sweep_csv = run_dir / "sweep.csv"
    if sweep_csv.is_file():
        out.append(plot_sweep(sweep_csv, run_dir / "sweep.png"))
    return out
