import logging
import queue
import threading

logger = logging.getLogger(__name__)

_DONE = object()


class PrefetchQueue:
    """
    A bounded queue filled by a background thread from an iterator.
    Items are delivered in exactly the order the iterator produces them.
    """
    def __init__(self, producer, max_size=4):
        """
        Initializes the PrefetchQueue.

        Args:
            producer (iterable): Source of items, consumed on the worker thread.
            max_size (int): Maximum number of items held ahead of the consumer. Defaults to 4.
        """
        self.queue = queue.Queue(maxsize=max(1, max_size))
        self.producer = producer
        self._worker_thread = None
        self._stop = threading.Event()
        self._error = None

    def start_worker(self):
        """Starts the background worker thread."""
        self._worker_thread = threading.Thread(target=self._worker, name='prefetch-worker', daemon=True)
        self._worker_thread.start()
        logger.debug("Prefetch worker started.")

    def stop_worker(self):
        """Stops the worker, discarding anything it has queued."""
        self._stop.set()
        if self._worker_thread:
            while self._worker_thread.is_alive():
                try:
                    self.queue.get_nowait()
                except queue.Empty:
                    self._worker_thread.join(timeout=0.05)
            logger.debug("Prefetch worker stopped.")

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _worker(self):
        """The worker loop that drains the producer into the queue."""
        try:
            for item in self.producer:
                if not self._put(item):
                    return
        except Exception as e:
            logger.error(f"Prefetch worker failed: {e}", exc_info=True)
            self._error = e
        finally:
            self._put(_DONE)

    def __iter__(self):
        if self._worker_thread is None:
            self.start_worker()
        try:
            while True:
                item = self.queue.get()
                if item is _DONE:
                    break
                yield item
            if self._error is not None:
                raise self._error
        finally:
            self.stop_worker()
