"""A small coverage study on the rich Emax design.

Runs K replicates (default 4) with B bootstrap samples each (default 20),
then prints the coverage and relative-bias tables and writes the SVG
figures to ``demo_study/``.  Replicate records are stored there too, so
rerunning with the same arguments resumes instead of recomputing.

``python demos/coverage_study.py [K] [B]``
"""
import sys
from pathlib import Path

from nlmemboot.report import write_study_figures
from nlmemboot.study import bias_csv, coverage_csv, read_table_csv, run_study, scenario_preset

K = int(sys.argv[1]) if len(sys.argv) > 1 else 4
B = int(sys.argv[2]) if len(sys.argv) > 2 else 20
out = Path("demo_study")

scenario = scenario_preset("rich_emax", K=K, B=B, M=50)
report = run_study(scenario, master_seed=1, out_dir=out / "replicates",
                   progress=lambda rec: print(f"replicate {rec['k'] + 1}/{K}: {rec['status']}"))

cov, bias = coverage_csv([report]), bias_csv([report])
print("\n90% coverage (MC.SE)")
for row in read_table_csv(cov):
    if row["alpha"] == 0.1 and row["parameter"] in ("E0", "Emax", "ED50", "omega2_Emax"):
        print(f"  {row['method']:<11}{row['parameter']:<13}{row['coverage']:.2f} ({row['mc_se']:.2f})")

print("\nrelative bias of SE (%)")
for row in read_table_csv(bias):
    if row["parameter"] in ("E0", "Emax"):
        print(f"  {row['method']:<11}{row['parameter']:<13}{row['rb_se_pct']:+.1f}")

(out / "coverage.csv").write_text(cov)
(out / "bias.csv").write_text(bias)
for path in write_study_figures(out, read_table_csv(cov), read_table_csv(bias)):
    print("wrote", path)
