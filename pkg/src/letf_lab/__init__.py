"""Model-driven statistical arbitrage toolkit for options on (leveraged) ETFs.

Heston calibration and simulation, conditional integrated variance,
moneyness scaling between leverage ratios, robust smile smoothing with
bootstrap uniform bands, dynamic semiparametric factor models with VAR
forecasts, a delta-hedged daily backtest and block-bootstrap robustness runs.
"""

__version__ = "0.1.0"
