import pandas as pd
from pandera import DataFrameModel, Field
from pandera.typing import Series

from watchtower.lookups import TASK_MODES

'''
    Every table the pipeline writes is validated against one of these before it leaves a function
'''

EVENT_COLUMNS = ["stream_id", "pair_index", "t", "mode", "trigger", "eos_prob", "category", "text", "clipped"]
TRACE_COLUMNS = ["stream_id", "pair_index", "t", "eos_prob"]


class LossCurveSchema(DataFrameModel):

    stage: Series[str] = Field(isin = ["distill", "pretrain", "finetune"])
    epoch: Series[int] = Field(ge = 0)
    train_loss: Series[float]
    held_out_loss: Series[float] = Field(nullable = True)

    class Config:
        coerce = True
        strict = True


class EventLogSchema(DataFrameModel):

    stream_id: Series[str]
    pair_index: Series[int] = Field(ge = 0)
    t: Series[float] = Field(ge = 0)
    mode: Series[str] = Field(isin = TASK_MODES)
    trigger: Series[str] = Field(isin = ["eos-gate", "query"])
    eos_prob: Series[float] = Field(ge = 0, le = 1)
    category: Series[str] = Field(nullable = True)
    text: Series[str]
    clipped: Series[bool]

    class Config:
        coerce = True
        strict = True


class EosTraceSchema(DataFrameModel):

    stream_id: Series[str]
    pair_index: Series[int] = Field(ge = 0)
    t: Series[float] = Field(ge = 0)
    eos_prob: Series[float] = Field(ge = 0, le = 1)

    class Config:
        coerce = True
        strict = True


class CategoryTableSchema(DataFrameModel):

    category: Series[str]
    support: Series[int] = Field(ge = 0)
    tp: Series[int] = Field(ge = 0)
    fp: Series[int] = Field(ge = 0)
    fn: Series[int] = Field(ge = 0)
    f1: Series[float] = Field(ge = 0, le = 100)

    class Config:
        coerce = True
        strict = True


class AblationSchema(DataFrameModel):

    study: Series[str] = Field(isin = ["strd", "depth", "gamma", "efficacy"])
    setting: Series[str]
    seed: Series[int]
    metric: Series[str]
    value: Series[float] = Field(nullable = True)

    class Config:
        coerce = True
        strict = True


class BenchSchema(DataFrameModel):

    max_len: Series[int] = Field(ge = 0)
    receptive_field_s: Series[float] = Field(ge = 0)
    pairs_per_s: Series[float] = Field(ge = 0)
    p50_ms: Series[float]
    p90_ms: Series[float]
    p99_ms: Series[float]
    early_median_ms: Series[float]
    late_median_ms: Series[float]

    class Config:
        coerce = True
        strict = True


def category_or_none(value) -> str | None:

    ## coerced string columns can carry nulls as "None" / "nan"
    if value is None or pd.isna(value) or str(value) in ("", "None", "nan", "<NA>"):
        return None

    return str(value)
