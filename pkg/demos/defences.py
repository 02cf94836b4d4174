"""
Defences against reconstruction
===============================

The same reconstruction attack against three ways of blurring the shared
update: averaging it with other clients' updates, clipping plus Gaussian
noise, and exposing only a random subset of entries. Success is the
fraction of restarts whose SSIM to the true image reaches 0.5; the
Jacobian F-norm measures how strongly the exposed update reacts to the
private input.
"""
from gradleak.harness import ScenarioConfig, run_scenario

base = dict(model="fc2", attack="dra", n=64, height=8, width=8, seeds=[0, 1],
            restarts=4, dra_members=["L2"], dra_steps=200, taus=[0.5])

for sweep, values in (("mix_factor", [0, 3, 10]), ("dp_sigma", [1e-4, 1e-2, 1.0]), ("mask_fraction", [1.0, 0.1, 0.01])):
    report = run_scenario(ScenarioConfig(name=sweep, sweep=sweep, sweep_values=values, **base))
    print(sweep)
    for v in values:
        succ = [r.value for r in report.select(metric="success_prob", sweep_value=float(v))]
        jac = [r.value for r in report.select(metric="jac_F", sweep_value=float(v))]
        print(f"  {v:>8g}  success {sum(succ) / len(succ):.2f}  jac_F {sum(jac) / len(jac):.4f}")
