"""Export a leaf cache and query it over TCP, as a client of the server would."""

import json
import socket
import tempfile
from pathlib import Path

from queryclf.data import generate_synthetic, split_dataset
from queryclf.serving import CacheServer, export_cache, load_cache
from queryclf.trainer import TrainConfig, train


def main():
    tax, samples, knowledge = generate_synthetic(20, 1000, seed=4)
    train_s, val_s, test_s = split_dataset(samples, (0.8, 0.1, 0.1), seed=0)
    cfg = TrainConfig.from_file(Path(__file__).resolve().parents[1] / "configs" / "desk.cfg")
    res = train(cfg.with_overrides(epochs=10), train_s, val_s, tax, knowledge)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "leaf.cache"
        export_cache(res.model, res.graph, tax, path)
        print(f"cache: {path.stat().st_size} bytes for {tax.num_leaves} leaves")
        server = CacheServer(load_cache(path))
        server.start_background()
        try:
            with socket.create_connection(server.server_address) as sock:
                f = sock.makefile("rw", encoding="utf-8", newline="\n")
                for line in [json.dumps({"query": s.query_text}) for s in test_s[:3]] + ['{"query": 7}']:
                    f.write(line + "\n")
                    f.flush()
                    print(line, "->", f.readline().strip())
        finally:
            server.shutdown()
            server.server_close()


if __name__ == "__main__":
    main()
