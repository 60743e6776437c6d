"""Tests for exporting record collections to Arrow, pandas, polars and numpy."""

import numpy as np
import pandas as pd
import pyarrow as pa
import pytest

from advscenario.conversion import concat, stream_batches, to_arrow, to_dict, to_numpy, to_pandas, to_polars
from advscenario.ingest import load_trajectories
from advscenario.kernel import ContactSide
from conftest import datafile


def batches_to_tables(batches):
    return [pa.Table.from_batches([b]) for b in batches]


@pytest.fixture
def records():
    return load_trajectories(datafile("canonical_sample.csv"), "canonical")[0].records


class TestArrow:
    """Test building Arrow tables from the supported inputs."""

    def test_dataclass_rows(self, records):
        """Test that dataclass records become one row each."""
        table = to_arrow(records)
        assert table.num_rows == len(records)
        assert "local_x" in table.schema.names

    def test_mapping_of_columns(self):
        """Test that 2-D array columns become list columns."""
        table = to_arrow({"a": np.arange(3), "b": np.ones((3, 2))})
        assert pa.types.is_list(table.schema.field("b").type)
        assert to_numpy(table)["b"].shape == (3, 2)

    def test_enums_become_values(self):
        """Test that enum fields export as their values."""
        assert to_dict([{"side": ContactSide.FRONT}]) == {"side": ["front"]}

    def test_passthrough(self):
        """Test that tables and DataFrames pass through."""
        table = pa.table({"x": [1, 2]})
        assert to_arrow(table) is table
        assert to_arrow(pd.DataFrame({"x": [1, 2]})).equals(table)

    def test_unsupported(self):
        """Test that arbitrary objects are rejected with a hint."""
        with pytest.raises(TypeError, match="dicts"):
            to_arrow([object()])

    def test_inconsistent_rows(self):
        """Test that rows with clashing types raise ValueError."""
        with pytest.raises(ValueError, match="consistent types"):
            to_arrow([{"x": 1}, {"x": "one"}])


class TestExports:
    """Test the pandas, polars and numpy exports."""

    def test_pandas(self, records):
        """Test that the DataFrame keeps every record."""
        df = to_pandas(records)
        assert isinstance(df, pd.DataFrame)
        assert len(df) == len(records)
        assert df["vehicle_id"].tolist() == [r.vehicle_id for r in records]

    def test_polars(self, records):
        """Test the polars export when polars is installed."""
        pl = pytest.importorskip("polars")
        assert isinstance(to_polars(records), pl.DataFrame)

    def test_numpy(self, records):
        """Test one array per column."""
        arrays = to_numpy(records)
        assert arrays["frame"].tolist() == [r.frame for r in records]


class TestBatches:
    """Test streaming record batches."""

    def test_batch_sizes(self):
        """Test that batches cover every row in order."""
        rows = [{"i": i} for i in range(10)]
        batches = list(stream_batches(rows, batch_size=4))
        assert [b.num_rows for b in batches] == [4, 4, 2]
        assert concat(batches_to_tables(batches)).column("i").to_pylist() == list(range(10))

    def test_bad_batch_size(self):
        """Test that a non-positive batch size raises ValueError."""
        with pytest.raises(ValueError):
            list(stream_batches([{"i": 1}], batch_size=0))

    def test_concat_needs_input(self):
        """Test that concatenating nothing raises ValueError."""
        with pytest.raises(ValueError):
            concat([])
