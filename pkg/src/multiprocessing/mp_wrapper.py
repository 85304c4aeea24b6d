import multiprocessing as mp



def worker_wrapper(arg):
    worker, kwargs = arg
    return worker(**kwargs)


def mp_kwargs_wrapper(worker, kwargs_list, processes=None):
    """Map `worker(**kwargs)` over kwargs_list in a process pool; results keep the input order."""
    arg = [(worker, kwargs) for kwargs in kwargs_list]
    with mp.Pool(processes=processes) as pool:
        result = pool.map(worker_wrapper, arg)
    return result
