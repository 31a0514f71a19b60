# report_templates.py

# DISCOVERY OUTPUT
# One line per hyperedge; parents listed as modality:series:lag.
HYPEREDGE_LINE = "TARGET {target} <- {{{parents}}} F={F} p={p} window={window}"

SCHEDULE_SUMMARY_HEADER = "windows={windows} tests={tests}"
WINDOW_SUMMARY_LINE = "  window={window} hyperedges={hyperedges} source_target_pairs={pairs}"
HISTOGRAM_LINE = "  [{lo:.1f}, {hi:.1f}) {count}"

# GROUND TRUTH COMPARISON
RECOVERY_LINE = "recovery precision={precision:.3f} recall={recall:.3f} planted={planted} found={found}"

# EVALUATION REPORT
EVAL_REPORT_HEADER = (
    "# CSHT evaluation report\n"
    "# NDCG@{k}: binary relevance = realized top-{k} next-day returns, averaged per day\n"
    "# regime accuracy: sign of the {horizon}-day forward index return, one prediction per day\n"
    "# causal alignment: sanctioned / cross-node attention mass on prediction rows, self-edges excluded\n"
)
EVAL_TABLE_HEADER = "{scope:<28} {mae:>10} {acc:>10} {ndcg:>10} {align:>10}"
EVAL_TABLE_ROW = "{scope:<28} {mae:>10} {acc:>10} {ndcg:>10} {align:>10}"

# PREDICT REPORT
FORECAST_HEADER = "Forecasts for {date} (graph window {window})"
ATTENTION_PATH_HEADER = "Attention path for {asset} (layer {layer}, head-averaged)"
ATTENTION_PATH_ROW = "  {rank:>2}. {node:<32} {weight:.4f}"
