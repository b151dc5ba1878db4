"""MPPI on a system we can solve by hand.

For z' = z + a the best single action toward z* is just z* - z. Scoring only
the first predicted step turns the H-step planner into a check of that answer.
Random shooting over the same budget is shown for contrast.
"""
import numpy as np

from keydyn.plan import LinearSystem, PlannerConfig, RewardSpec, mppi_plan, shoot_plan

system = LinearSystem(np.eye(2))
first_only = np.r_[1.0, np.zeros(9)]

for seed in range(5):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-0.5, 0.5, 2)
    a_star = 0.1 * np.array([np.cos(seed), np.sin(seed)])
    cfg = PlannerConfig(seed=seed)
    plan = mppi_plan(system, (z, z), RewardSpec.to_goal(z + a_star, first_only), cfg)
    rel = np.linalg.norm(plan.actions[0] - a_star) / np.linalg.norm(a_star)
    full = RewardSpec.to_goal(z + a_star)
    r_mppi = mppi_plan(system, (z, z), full, cfg).reward
    r_shoot = shoot_plan(system, (z, z), full, cfg).reward
    print(f"seed {seed}: first action off by {100 * rel:4.1f}%   reward MPPI {r_mppi:8.4f}  shooting {r_shoot:8.4f}")
