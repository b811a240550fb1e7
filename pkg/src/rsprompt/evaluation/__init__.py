from .metrics import ConfusionMatrix, EvalReport, aggregate_runs, confusion, make_report, predictions_from, top1
from .report import emit_report, results_table
from .transfer import (
    METHOD_ORDER,
    TransferMatrix,
    UnsupportedMethodError,
    WinnerMatrix,
    cross_eval,
    evaluate_state,
    predict,
    winner,
)
