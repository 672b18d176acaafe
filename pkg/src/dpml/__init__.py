"""Dual-process meta-learning for per-stock intraday volume regression."""
from .baselines import BaselineKind, fit_linear_baseline, predict_ema, predict_naive, predict_sma
from .diff_core import MlpSpec, ParamVector, grad_check, linear_predict, mlp_forward, mlp_grad, mlp_init
from .inference_eval import EvalReport, adapt_for_stock, compute_metrics, evaluate_all, predict_stock
from .market_data import (MarketPanel, NormStats, StockTask, SynthConfig, apply_norm, build_instances,
                          fit_norm_stats, load_panel, split_tasks, synth_generate)
from .meta_engine import MetaModel, RunConfig, load_model, meta_train, save_model

__version__ = "0.1.0"
