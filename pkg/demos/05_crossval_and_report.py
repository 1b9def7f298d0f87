"""Small 5-fold cross-validation in both pipeline modes, with the emitted
report files (what the CLI's crossval command does, at demo scale).

Run: python3 demos/05_crossval_and_report.py   (a few minutes on CPU)
"""

from pathlib import Path

from papnet.classifier import CrossvalConfig, TrainConfig, run_crossval
from papnet.data import AugmentConfig, generate_synthetic, plan_stratified_kfold
from papnet.evaluation import compare_runs, comparison_csv_text, truncate_pct, write_report_files
from papnet.unet import UNetTrainConfig

out = Path(__file__).parent / "out" / "crossval"
samples = generate_synthetic(80, seed=12)
plan = plan_stratified_kfold(samples, k=5, seed=42)
cfg = CrossvalConfig(
    seed=42, input_size=64, filters=(8, 16, 32), dense_units=16,
    train=TrainConfig(epochs=3, batch_size=16, learning_rate=2e-3),
    aug=AugmentConfig(contrast_range=(0.9, 1.1)),
    unet_base_width=2,
    unet_train=UNetTrainConfig(epochs=2, batch_size=8, learning_rate=3e-3,
                               input_size=64, blur_sigma=None),
)

reports = {}
for mode in ("raw", "segmented"):
    result = run_crossval(samples, plan, mode, cfg)
    reports[mode] = result.report
    write_report_files(result.report, out / mode)
    m = result.report.pooled_metrics
    print(f"[{mode}] pooled accuracy {truncate_pct(m.accuracy):.2f}% "
          f"f1 {truncate_pct(m.f1_weighted):.2f}%")

rows = compare_runs(reports["raw"], reports["segmented"])
(out / "comparison.csv").write_text(comparison_csv_text(rows))
for row in rows:
    print(f"{row['metric']}: {row['delta_pooled_pp']:+.2f}pp (pooled)")
print(f"report files in {out}")
