"""SmallBank workload and the benchmark harness (``ctr.bench.harness``)."""
