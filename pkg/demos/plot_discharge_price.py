"""
Choosing the discharging price for one slot
===========================================

The aggregator scans candidate discharging prices, lets every plugged EV
respond, and keeps the price with the highest slot revenue. The revenue curve
is piecewise smooth with kinks wherever an EV switches mode.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from isat.aggregator import EvaParams, FleetSlice, optimize_discharge_price, price_grid, revenue_curve
from isat.market import BatteryModel

rng = np.random.default_rng(3)
n = 12
fleet = FleetSlice([f"ev{k}" for k in range(n)], rng.uniform(0.3, 1.0, n),
                   rng.choice([24.0, 40.0, 60.0, 160.0], n), np.full(n, 0.81))
params = EvaParams()
battery = BatteryModel()

# peak hour with a 5 kWh shortfall the EVA must cover
p_rt, e_limit = 1.12, 5.0
grid = price_grid(-3 * p_rt, 0.0, params.grid_step)
curve = revenue_curve(grid, fleet, p_rt, e_limit, params, battery)
p_star = optimize_discharge_price(fleet, p_rt, e_limit, params, battery)
print(f"best discharging price {p_star:.2f} CNY/kWh, revenue {curve.max():.3f} CNY")

plt.plot(grid, curve)
plt.axvline(p_star, ls="--", c="gray")
plt.xlabel("discharging price (CNY/kWh)")
plt.ylabel("slot revenue (CNY)")
plt.savefig("discharge_price.png", dpi=120)
