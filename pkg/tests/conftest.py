from cg2a.perf import tune_allocator

tune_allocator()
