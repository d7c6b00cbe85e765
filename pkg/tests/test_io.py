import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from sargraph.core.errors import InputError
from sargraph.core.io import (decode_sarf, encode_sarf, read_edge_list, read_labels, read_node_set,
                              read_partition_map, read_sarf, write_edge_list, write_labels, write_node_set,
                              write_partition_map, write_sarf)
from sargraph.core.partition import PartitionMap
from sargraph.core.synthetic import erdos_renyi, two_block_sbm


class TestFileFormats(unittest.TestCase):
    """Edge lists, partition maps, node sets and SARF tensors on disk"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_edge_list_with_comments(self):
        path = self.dir / "g.txt"
        path.write_text("# toy\n0 1\n\n2 0\n", encoding='utf-8')
        graph = read_edge_list(path)
        self.assertEqual(graph.num_nodes, 3)
        self.assertEqual(graph.num_edges, 2)
        self.assertEqual(graph.in_neighbors(0).tolist(), [2])

    def test_edge_list_symmetrize(self):
        path = self.dir / "g.txt"
        path.write_text("0 1\n", encoding='utf-8')
        graph = read_edge_list(path, num_nodes=4, symmetrize_edges=True)
        self.assertEqual(graph.num_nodes, 4)
        self.assertEqual(graph.num_edges, 2)

    def test_edge_list_errors_name_the_line(self):
        path = self.dir / "g.txt"
        path.write_text("0 1\n0 x\n", encoding='utf-8')
        with self.assertRaisesRegex(InputError, ":2:"):
            read_edge_list(path)
        path.write_text("0 1\n0 1 0\n", encoding='utf-8')
        with self.assertRaises(InputError):
            read_edge_list(path)
        with self.assertRaises(InputError):
            read_edge_list(self.dir / "missing.txt")

    def test_edge_list_written_and_read_back(self):
        graph = erdos_renyi(20, 60, seed=0, num_relations=3).graph
        path = self.dir / "g.txt"
        write_edge_list(path, graph)
        again = read_edge_list(path, num_nodes=20)
        np.testing.assert_array_equal(again.indptr, graph.indptr)
        np.testing.assert_array_equal(again.indices, graph.indices)
        np.testing.assert_array_equal(again.edge_type, graph.edge_type)

    def test_partition_map(self):
        path = self.dir / "parts.txt"
        write_partition_map(path, PartitionMap(assignment=np.array([0, 1, 1, 0]), num_parts=2))
        self.assertEqual(path.read_text(), "0\n1\n1\n0\n")
        self.assertEqual(read_partition_map(path).num_parts, 2)

    def test_partition_map_with_empty_trailing_part(self):
        path = self.dir / "parts.txt"
        write_partition_map(path, PartitionMap(assignment=np.array([0, 1, 1, 0]), num_parts=3))
        pm = read_partition_map(path, num_parts=3)
        self.assertEqual(pm.num_parts, 3)
        self.assertEqual(pm.sizes().tolist(), [2, 2, 0])
        with self.assertRaises(InputError):
            read_partition_map(path, num_parts=1)

    def test_node_set_sorted_unique(self):
        path = self.dir / "train.txt"
        write_node_set(path, np.array([5, 1, 5, 3]))
        self.assertEqual(read_node_set(path).tolist(), [1, 3, 5])

    def test_sarf_header_layout(self):
        blob = encode_sarf(np.array([[1.0, 2.0]], dtype=np.float32))
        magic, version, rows, cols, code = struct.unpack_from("<4sIQQB", blob)
        self.assertEqual((magic, version, rows, cols, code), (b"SARF", 1, 1, 2, 0))
        self.assertEqual(len(blob), 25 + 8)
        self.assertEqual(blob[25:29], struct.pack("<f", 1.0))

    def test_sarf_f64_file(self):
        matrix = np.arange(6, dtype=np.float64).reshape(3, 2) / 7
        path = self.dir / "x.sarf"
        write_sarf(path, matrix)
        loaded = read_sarf(path)
        self.assertEqual(loaded.dtype, np.float64)
        np.testing.assert_array_equal(loaded, matrix)

    def test_sarf_rejects_corruption(self):
        blob = encode_sarf(np.ones((2, 2), dtype=np.float32))
        with self.assertRaises(InputError):
            decode_sarf(b"XXXX" + blob[4:])
        with self.assertRaises(InputError):
            decode_sarf(blob[:-1])
        with self.assertRaises(InputError):
            encode_sarf(np.ones((2, 2), dtype=np.int64))

    def test_labels(self):
        path = self.dir / "labels.sarf"
        write_labels(path, np.array([0, 2, -1]))
        self.assertEqual(read_labels(path).tolist(), [0, 2, -1])

    def test_synthetic_graph_files(self):
        synth = two_block_sbm(40, seed=1)
        paths = synth.write(self.dir / "sbm")
        self.assertEqual(read_sarf(paths["features"]).shape, (40, 16))
        self.assertEqual(read_labels(paths["labels"]).tolist(), synth.labels.tolist())
        self.assertEqual(read_edge_list(paths["graph"], num_nodes=40).num_edges, synth.graph.num_edges)


if __name__ == '__main__':
    unittest.main()
