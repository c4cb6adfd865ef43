# Worker package for long-running background processes.
