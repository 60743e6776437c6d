"""Conversion utilities for exporting record collections to common Python formats.

Trajectory records, scenario step rows, expert state-action pairs and
car-following segments all pass through a `pyarrow.Table`; from there they
convert to pandas, polars, numpy or plain dicts.

Example:
    >>> from advscenario.conversion import to_pandas
    >>> df = to_pandas(episode.records)
    >>> for batch in stream_batches(step_rows, batch_size=10_000):
    ...     process(batch)
"""

import dataclasses
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, Iterable, Iterator, Mapping

import numpy as np
import pyarrow as pa

if TYPE_CHECKING:
    import pandas as pd
    import polars as pl


def _row(record: Any) -> Dict[str, Any]:
    if dataclasses.is_dataclass(record) and not isinstance(record, type):
        row = {f.name: getattr(record, f.name) for f in dataclasses.fields(record)}
    elif isinstance(record, Mapping):
        row = dict(record)
    else:
        raise TypeError(
            f"Expected dataclass instances or mappings, got {type(record).__name__}. "
            "Convert custom objects to dicts before exporting them."
        )
    return {k: (v.value if isinstance(v, Enum) else v) for k, v in row.items()}


def to_arrow(records: Any) -> pa.Table:
    """Build an Arrow table from records.

    Args:
        records: A `pa.Table`, a pandas DataFrame, a mapping of column name
            to array-like, or an iterable of dataclass instances / mappings.
            numpy array fields of row records become list columns.

    Returns:
        pa.Table: The records as one table

    Raises:
        TypeError: If the records are of an unsupported type
        ValueError: If the columns cannot be combined into one table
    """
    if isinstance(records, pa.Table):
        return records
    if hasattr(records, "to_arrow") and hasattr(records, "columns") and not isinstance(records, Mapping):
        return records.to_arrow()
    try:
        import pandas as pd
        if isinstance(records, pd.DataFrame):
            return pa.Table.from_pandas(records, preserve_index=False)
    except ImportError:
        pass

    try:
        if isinstance(records, Mapping):
            return pa.table({
                name: (np.asarray(col).tolist() if isinstance(col, np.ndarray) and col.ndim > 1 else col)
                for name, col in records.items()
            })
        rows = [_row(r) for r in records]
        for row in rows:
            for key, value in row.items():
                if isinstance(value, np.ndarray):
                    row[key] = value.tolist()
        return pa.Table.from_pylist(rows)
    except (pa.ArrowInvalid, pa.ArrowTypeError) as e:
        raise ValueError(
            f"Failed to combine records into an Arrow table: {e}. "
            "Check that every record has the same fields with consistent types."
        ) from e


def stream_batches(records: Any, batch_size: int = 65_536) -> Iterator[pa.RecordBatch]:
    """Iterate over RecordBatches of at most `batch_size` rows."""
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    yield from to_arrow(records).to_batches(max_chunksize=batch_size)


def to_pandas(records: Any) -> "pd.DataFrame":
    """Convert records to a pandas DataFrame.

    Raises:
        ImportError: If pandas is not installed
    """
    try:
        import pandas  # noqa: F401
    except ImportError as e:
        raise ImportError(
            "pandas is required for to_pandas(). "
            "Install it with: pip install pandas"
        ) from e
    return to_arrow(records).to_pandas()


def to_polars(records: Any) -> "pl.DataFrame":
    """Convert records to a Polars DataFrame.

    Raises:
        ImportError: If polars is not installed
    """
    try:
        import polars as pl
    except ImportError as e:
        raise ImportError(
            "polars is required for to_polars(). "
            "Install it with: pip install 'advscenario[polars]'"
        ) from e
    return pl.from_arrow(to_arrow(records))


def to_numpy(records: Any) -> Dict[str, np.ndarray]:
    """Convert records to a dictionary of numpy arrays, one per column.

    List columns become 2-D arrays when every row has the same length.
    """
    table = to_arrow(records)
    result = {}
    for name in table.schema.names:
        column = table.column(name)
        try:
            if pa.types.is_list(column.type) or pa.types.is_large_list(column.type):
                result[name] = np.asarray(column.to_pylist(), dtype=np.float64)
            else:
                result[name] = column.to_numpy()
        except Exception as e:
            raise RuntimeError(f"Failed to convert column '{name}' to numpy: {e}") from e
    return result


def to_dict(records: Any) -> Dict[str, list]:
    """Convert records to a dictionary of lists, suitable for JSON."""
    return to_arrow(records).to_pydict()


def concat(tables: Iterable[Any]) -> pa.Table:
    """Concatenate record collections sharing one schema."""
    parts = [to_arrow(t) for t in tables]
    if not parts:
        raise ValueError("No tables to concatenate.")
    return pa.concat_tables(parts)
