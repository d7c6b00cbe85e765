import socket
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import pandas as pd

from sargraph.api.cli import EXIT_INPUT, EXIT_OK, EXIT_RUNTIME, main
from sargraph.api.commands import load_job_data
from sargraph.api.config import load_config
from sargraph.core.errors import InputError, TransportAbort
from sargraph.core.io import read_partition_map
from sargraph.core.synthetic import erdos_renyi


class TestCommandLine(unittest.TestCase):
    """partition, train and bench from a config file"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.paths = erdos_renyi(120, 800, seed=21).write(self.dir)

    def tearDown(self):
        self.tmp.cleanup()

    def _config(self, name="job.cfg", **extra):
        lines = {
            "graph": self.paths["graph"],
            "features": self.paths["features"],
            "labels": self.paths["labels"],
            "partition": self.dir / "parts.txt",
            "n_parts": 2,
            "epochs": 2,
            "evaluate": "false",
            "layer.0.type": "sage",
            "layer.0.in_dim": 16,
            "layer.0.out_dim": 8,
            "layer.1.type": "sage",
            "layer.1.in_dim": 8,
            "layer.1.out_dim": 4,
        }
        lines.update(extra)
        path = self.dir / name
        text = "".join(f"{key} = {value}\n" for key, value in lines.items() if value is not None)
        path.write_text(text, encoding='utf-8')
        return str(path)

    def test_partition_is_deterministic(self):
        config = self._config()
        self.assertEqual(main(["partition", "--config", config]), EXIT_OK)
        first = (self.dir / "parts.txt").read_bytes()
        self.assertEqual(main(["partition", "--config", config]), EXIT_OK)
        self.assertEqual((self.dir / "parts.txt").read_bytes(), first)
        pm = read_partition_map(self.dir / "parts.txt")
        self.assertEqual((pm.num_nodes, pm.num_parts), (120, 2))

    def test_configured_part_count_governs_the_map(self):
        (self.dir / "parts.txt").write_text("0\n" * 60 + "1\n" * 60, encoding='utf-8')
        data = load_job_data(load_config(self._config(n_parts=3)))
        self.assertEqual(data.partition.num_parts, 3)
        self.assertEqual(data.partition.sizes().tolist(), [60, 60, 0])
        inferred = load_job_data(load_config(self._config("inferred.cfg", n_parts=None)))
        self.assertEqual(inferred.partition.num_parts, 2)
        (self.dir / "parts.txt").write_text("0\n" * 60 + "2\n" * 60, encoding='utf-8')
        with self.assertRaises(InputError):
            load_job_data(load_config(self._config(n_parts=2)))

    def test_train_writes_metrics(self):
        metrics = self.dir / "metrics.csv"
        config = self._config(metrics_path=metrics)
        self.assertEqual(main(["train", "--config", config, "--no-progress"]), EXIT_OK)
        self.assertEqual(len(pd.read_csv(metrics)), 4)

    def test_bench(self):
        bench = self.dir / "bench.csv"
        config = self._config(bench_path=bench, bench_epochs=1, bench_modes="sar,vanilla-dp")
        self.assertEqual(main(["bench", "--config", config]), EXIT_OK)
        self.assertEqual(sorted(pd.read_csv(bench)["mode"].unique()), ["sar", "vanilla-dp"])

    def test_input_errors(self):
        self.assertEqual(main(["train", "--config", str(self.dir / "missing.cfg")]), EXIT_INPUT)
        self.assertEqual(main(["train", "--config", self._config("bad.cfg", epochs=0)]), EXIT_INPUT)
        broken = self._config("broken.cfg", graph=self.dir / "nowhere.txt")
        self.assertEqual(main(["train", "--config", broken, "--no-progress"]), EXIT_INPUT)

    def test_runtime_error(self):
        with patch("sargraph.api.cli.cmd_train", side_effect=TransportAbort("peer 1 went away")):
            self.assertEqual(main(["train", "--config", self._config()]), EXIT_RUNTIME)

    def test_busy_port_is_a_runtime_error(self):
        rankfile = self.dir / "ranks.txt"
        with socket.create_server(("127.0.0.1", 0)) as busy:
            port = busy.getsockname()[1]
            rankfile.write_text(f"0 127.0.0.1:{port}\n1 127.0.0.1:{port}\n", encoding='utf-8')
            code = main(["train", "--config", self._config(), "--transport", "tcp", "--rankfile", str(rankfile),
                         "--rank", "0", "--no-progress"])
        self.assertEqual(code, EXIT_RUNTIME)

    def test_tcp_without_rank(self):
        config = self._config()
        self.assertEqual(main(["train", "--config", config, "--transport", "tcp", "--no-progress"]), EXIT_INPUT)


if __name__ == '__main__':
    unittest.main()
