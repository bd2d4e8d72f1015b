import numpy as np
import pytest

from clustermark import Clustering, SecretKey, TokenEmbeddingTable


class TableModel:
    """Markov-1 test double with an explicit row per previous token."""

    def __init__(self, matrix, start_row=None):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        n = self.matrix.shape[1]
        self.start = (
            np.full(n, 1.0 / n) if start_row is None else np.asarray(start_row, dtype=np.float64)
        )

    @property
    def vocab_size(self):
        return int(self.matrix.shape[1])

    def next_distribution(self, context):
        if len(context) == 0:
            return self.start
        return self.matrix[int(context[-1])]


class ConstantModel:
    """Context-free test double: the same row at every step."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=np.float64)

    @property
    def vocab_size(self):
        return int(self.row.size)

    def next_distribution(self, context):
        return self.row


@pytest.fixture
def key():
    return SecretKey(bytes(range(32)))


@pytest.fixture
def other_key():
    return SecretKey(bytes(range(100, 132)))


@pytest.fixture
def two_cluster():
    # tokens {0,1} in cluster 0, {2,3} in cluster 1
    return Clustering(h=2, assignment=np.array([0, 0, 1, 1]))


@pytest.fixture
def four_point_table():
    return TokenEmbeddingTable(
        np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]], dtype=np.float32)
    )
