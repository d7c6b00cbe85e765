"""
Start the workers of one job: one thread per worker over a loopback hub, or
this process's single worker over TCP.
"""
from typing import Dict, List, Optional, Tuple
import logging
import threading

from ..api.models import TrainConfig
from ..core.errors import InputError, SarGraphError, TransportAbort
from ..transport.loopback import LoopbackHub
from ..transport.tcp import Address, TcpTransport
from .metrics import MetricsSink
from .worker import JobData, TrainResult, Worker

logger = logging.getLogger(__name__)


def _root_cause(errors: List[Tuple[int, BaseException]]) -> BaseException:
    """The first failure that is not just a peer noticing the abort"""
    for _, error in errors:
        if not isinstance(error, TransportAbort):
            return error
    return errors[0][1]


def run_loopback(config: TrainConfig, data: JobData, sink: Optional[MetricsSink] = None,
                 progress: bool = True) -> List[TrainResult]:
    world_size = data.partition.num_parts
    hub = LoopbackHub(world_size, config.timeout)
    results: List[Optional[TrainResult]] = [None] * world_size
    errors: List[Tuple[int, BaseException]] = []
    lock = threading.Lock()

    def run(rank: int) -> None:
        try:
            worker = Worker(config, data, hub.transport(rank), sink)
            results[rank] = worker.train(progress)
        except Exception as e:
            if not isinstance(e, TransportAbort):
                logger.error(f"[rank {rank}] failed: {e}")
            with lock:
                errors.append((rank, e))
            hub.abort(f"rank {rank} failed: {e}")

    threads = [threading.Thread(target=run, args=(rank,), name=f"sar-worker-{rank}", daemon=True)
               for rank in range(world_size)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    if errors:
        error = _root_cause(errors)
        if isinstance(error, SarGraphError):
            raise error
        raise SarGraphError(f"worker failed: {error!r}") from error
    return results


def run_tcp_worker(config: TrainConfig, data: JobData, rank: int, addresses: Dict[int, Address],
                   sink: Optional[MetricsSink] = None, progress: bool = True) -> TrainResult:
    if rank not in addresses:
        raise InputError(f"rank {rank} has no address")
    host, port = addresses[rank]
    try:
        transport = TcpTransport(rank, len(addresses), listen=addresses[rank], timeout=config.timeout)
    except OSError as e:
        raise TransportAbort(f"[rank {rank}] cannot listen on {host}:{port}: {e}") from e
    try:
        transport.set_peers(addresses)
        worker = Worker(config, data, transport, sink)
        return worker.train(progress)
    except Exception as e:
        logger.error(f"[rank {rank}] failed: {e}")
        transport.abort(str(e))
        if isinstance(e, SarGraphError):
            raise
        raise SarGraphError(f"worker failed: {e!r}") from e
    finally:
        transport.close()
