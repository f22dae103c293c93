"""Message-based asynchronous I/O syscalls.

Each cell gets one shared ring of fixed 64-byte message headers plus a
payload data area, and one exclusive serving thread.  A single polling
dispatcher moves SUBMITTED messages to the cell's server queue; cell-side
fibers yield while their syscall is in flight and poll their slot for
completion.  Serving threads execute real file operations inside a
sandbox directory against a per-cell context replica.
"""

import errno
import os
import queue
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import AttachError

# Header layout, exactly one 64-byte cache line:
#   syscall u16 | cell u16 | status u16 | errcode u16 |
#   payload_offset u32 | payload_len u32 | ticket u64 | args 4*u64 | result i64
HEADER_FMT = "<HHHhIIQ4Qq"
HEADER_SIZE = struct.calcsize(HEADER_FMT)
PAYLOAD_SLOT = 4096
DEFAULT_RING_SLOTS = 64


class Status(IntEnum):
    FREE = 0
    SUBMITTED = 1
    DISPATCHED = 2
    COMPLETED = 3
    FAILED = 4


_VALID_TRANSITIONS = {
    (Status.FREE, Status.SUBMITTED),
    (Status.SUBMITTED, Status.DISPATCHED),
    (Status.DISPATCHED, Status.COMPLETED),
    (Status.DISPATCHED, Status.FAILED),
    (Status.COMPLETED, Status.FREE),
    (Status.FAILED, Status.FREE),
}


class Syscall(IntEnum):
    OPEN = 1
    CLOSE = 2
    READ = 3
    WRITE = 4
    FSYNC = 5


@dataclass
class IoMessage:
    syscall: int
    cell_id: int
    status: int
    errcode: int
    payload_offset: int
    payload_len: int
    ticket: int
    args: tuple
    result: int

    def pack_into(self, buf, off):
        struct.pack_into(HEADER_FMT, buf, off, self.syscall, self.cell_id,
                         self.status, self.errcode, self.payload_offset,
                         self.payload_len, self.ticket, *self.args,
                         self.result)

    @classmethod
    def unpack_from(cls, buf, off):
        vals = struct.unpack_from(HEADER_FMT, buf, off)
        return cls(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5],
                   vals[6], vals[7:11], vals[11])


class SharedRing:
    """Single producer (the cell) / single consumer (the dispatcher) ring
    of fixed-size message headers with a payload data area.

    The status field is the synchronization point; every transition is
    appended to an audit log so the FREE->SUBMITTED->DISPATCHED->
    {COMPLETED|FAILED}->FREE automaton can be checked post-hoc.
    """

    def __init__(self, slots=DEFAULT_RING_SLOTS):
        if slots & (slots - 1):
            raise ValueError("slot count must be a power of two")
        self.slots = slots
        self.headers = bytearray(slots * HEADER_SIZE)
        self.data_area = bytearray(slots * PAYLOAD_SLOT)
        self.audit = []
        self._audit_lock = threading.Lock()
        self._scan = 0

    def read_slot(self, i):
        return IoMessage.unpack_from(self.headers, i * HEADER_SIZE)

    def write_slot(self, i, msg):
        msg.pack_into(self.headers, i * HEADER_SIZE)

    def status_of(self, i):
        # status field sits at byte offset 4 within the header
        return Status(struct.unpack_from("<H", self.headers,
                                         i * HEADER_SIZE + 4)[0])

    def set_status(self, i, new, ticket):
        old = self.status_of(i)
        if (old, new) not in _VALID_TRANSITIONS:
            raise AssertionError(
                f"slot {i}: illegal status transition {old.name} -> {new.name}")
        with self._audit_lock:
            self.audit.append((i, ticket, old, new))
        # Payload/result fields are written before the status flip; under
        # the GIL the flip publishes them to the consumer side.
        struct.pack_into("<H", self.headers, i * HEADER_SIZE + 4, new)

    def find_free_slot(self):
        for k in range(self.slots):
            i = (self._scan + k) % self.slots
            if self.status_of(i) == Status.FREE:
                self._scan = (i + 1) % self.slots
                return i
        return None

    def payload(self, i, length):
        off = i * PAYLOAD_SLOT
        return bytes(self.data_area[off:off + length])

    def set_payload(self, i, data):
        off = i * PAYLOAD_SLOT
        self.data_area[off:off + len(data)] = data


@dataclass
class CellContext:
    """Cell-side context replicated into the serving thread: working
    directory (sandbox-relative) and descriptor-table registration.
    """
    cwd: str = "."
    version: int = 0

    def snapshot(self):
        return CellContext(self.cwd, self.version)


class ServingThread:
    """Exclusive per-cell executor of dispatched syscall messages."""

    def __init__(self, server_id, sandbox_dir):
        self.server_id = server_id
        self.sandbox_dir = sandbox_dir
        self.cell_id = None
        self.ring = None
        self.inbox = queue.Queue()
        self.replica = CellContext()
        self.fd_table = {}           # logical fd -> os fd
        self._next_fd = 3
        self._thread = None
        self._stop = threading.Event()

    def bind(self, cell_id, ring, context):
        self.cell_id = cell_id
        self.ring = ring
        self.replica = context.snapshot()
        self.fd_table = {}
        self._next_fd = 3
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"xcell-io-server-{self.server_id}")
        self._thread.start()

    def unbind(self):
        self._stop.set()
        if self._thread is not None:
            self.inbox.put(None)
            self._thread.join()
            self._thread = None
        for fd in self.fd_table.values():
            try:
                os.close(fd)
            except OSError:
                pass
        self.fd_table = {}
        self.cell_id = None
        self.ring = None

    def _run(self):
        while not self._stop.is_set():
            item = self.inbox.get()
            if item is None:
                break
            self._serve(item)

    def _serve(self, slot):
        msg = self.ring.read_slot(slot)
        try:
            result, out_payload, err = self._execute(msg, slot)
        except OSError as exc:
            result, out_payload, err = -1, b"", exc.errno or errno.EIO
        msg = self.ring.read_slot(slot)
        msg.result = result
        msg.errcode = err
        if out_payload:
            self.ring.set_payload(slot, out_payload)
            msg.payload_len = len(out_payload)
        self.ring.write_slot(slot, msg)
        self.ring.set_status(slot, Status.FAILED if err else Status.COMPLETED,
                             msg.ticket)

    def _execute(self, msg, slot):
        sc = msg.syscall
        if sc == Syscall.OPEN:
            rel = self.ring.payload(slot, msg.payload_len).decode()
            path = os.path.join(self.sandbox_dir, self.replica.cwd, rel)
            flags = msg.args[0] or (os.O_RDWR | os.O_CREAT)
            os_fd = os.open(os.path.normpath(path), flags, 0o644)
            fd = self._next_fd
            self._next_fd += 1
            self.fd_table[fd] = os_fd
            return fd, b"", 0
        if sc == Syscall.CLOSE:
            os_fd = self.fd_table.pop(msg.args[0], None)
            if os_fd is None:
                return -1, b"", errno.EBADF
            os.close(os_fd)
            return 0, b"", 0
        if sc == Syscall.READ:
            os_fd = self.fd_table.get(msg.args[0])
            if os_fd is None:
                return -1, b"", errno.EBADF
            data = os.read(os_fd, min(msg.args[1], PAYLOAD_SLOT))
            return len(data), data, 0
        if sc == Syscall.WRITE:
            os_fd = self.fd_table.get(msg.args[0])
            if os_fd is None:
                return -1, b"", errno.EBADF
            data = self.ring.payload(slot, msg.payload_len)
            return os.write(os_fd, data), b"", 0
        if sc == Syscall.FSYNC:
            os_fd = self.fd_table.get(msg.args[0])
            if os_fd is None:
                return -1, b"", errno.EBADF
            os.fsync(os_fd)
            return 0, b"", 0
        return -1, b"", errno.ENOSYS


class Fiber:
    RUNNABLE = "RUNNABLE"
    WAITING = "WAITING"
    DONE = "DONE"

    def __init__(self, fiber_id, gen):
        self.fiber_id = fiber_id
        self.gen = gen
        self.state = Fiber.RUNNABLE
        self.waiting_ticket = None
        self.pending_result = None


class CellPort:
    """Cell-side endpoint: syscall submission, completion polling, and a
    round-robin fiber scheduler.  Confined to the cell's worker thread.
    """

    def __init__(self, engine, cell_id, ring, counters=None):
        self.engine = engine
        self.cell_id = cell_id
        self.ring = ring
        self.counters = counters
        self.context = CellContext()
        self.next_ticket = 0
        self._ticket_slot = {}
        self._results = {}           # harvested completions by ticket
        self._fibers = []
        self._next_fiber_id = 0
        self.interleaving = []       # (fiber_id, event) log
        self.tickets_issued = 0
        self.tickets_completed = 0
        self.tickets_failed = 0

    # -- context replication ------------------------------------------

    def chdir(self, rel):
        self.context.cwd = rel
        self.context.version += 1

    def sync_context(self):
        self.engine.sync_context(self.cell_id)

    # -- submission ----------------------------------------------------

    def submit(self, syscall, args=(), payload=b""):
        if len(payload) > PAYLOAD_SLOT:
            raise ValueError(f"payload exceeds {PAYLOAD_SLOT} bytes")
        while True:
            slot = self.ring.find_free_slot()
            if slot is not None:
                break
            self.poll_completions()
        ticket = self.next_ticket
        self.next_ticket += 1
        args = tuple(args) + (0,) * (4 - len(args))
        msg = IoMessage(int(syscall), self.cell_id, Status.FREE, 0,
                        slot * PAYLOAD_SLOT, len(payload), ticket, args, 0)
        self.ring.write_slot(slot, msg)
        if payload:
            self.ring.set_payload(slot, payload)
        self.sync_context()
        self.ring.set_status(slot, Status.SUBMITTED, ticket)
        self._ticket_slot[ticket] = slot
        self.tickets_issued += 1
        if self.counters is not None:
            self.counters.io_messages += 1
        return ticket

    def poll_completions(self):
        """Harvest COMPLETED/FAILED slots into the results store,
        recycling the slots to FREE.  Returns the store ({ticket:
        (result, errcode, payload)}); callers pop what they consume."""
        for ticket, slot in list(self._ticket_slot.items()):
            status = self.ring.status_of(slot)
            if status in (Status.COMPLETED, Status.FAILED):
                msg = self.ring.read_slot(slot)
                payload = self.ring.payload(slot, msg.payload_len) \
                    if msg.syscall == Syscall.READ else b""
                self._results[ticket] = (msg.result, msg.errcode, payload)
                self.ring.set_status(slot, Status.FREE, ticket)
                del self._ticket_slot[ticket]
                if status == Status.COMPLETED:
                    self.tickets_completed += 1
                else:
                    self.tickets_failed += 1
        return self._results

    def wait(self, ticket):
        """Synchronous completion wait (no fibers)."""
        while True:
            self.poll_completions()
            if ticket in self._results:
                return self._results.pop(ticket)
            self.engine.kick()

    def call(self, syscall, args=(), payload=b""):
        """Submit and wait; convenience for non-fiber callers."""
        return self.wait(self.submit(syscall, args, payload))

    @property
    def tickets_in_flight(self):
        return len(self._ticket_slot)

    # -- fibers --------------------------------------------------------

    def spawn(self, fn, *args):
        """Start a fiber.  `fn` is a generator function taking this port
        first; it yields (syscall, args, payload) tuples and receives the
        (result, errcode, payload) completion."""
        fiber = Fiber(self._next_fiber_id, fn(self, *args))
        self._next_fiber_id += 1
        self._fibers.append(fiber)
        return fiber

    def run_fibers(self):
        """Round-robin the fibers until all are DONE.  At most one fiber
        runs at any instant; issuing a syscall yields to the next
        RUNNABLE fiber."""
        while any(f.state != Fiber.DONE for f in self._fibers):
            progressed = False
            for fiber in self._fibers:
                if fiber.state != Fiber.RUNNABLE:
                    continue
                progressed = True
                self.interleaving.append((fiber.fiber_id, "run"))
                try:
                    request = fiber.gen.send(fiber.pending_result)
                except StopIteration:
                    fiber.state = Fiber.DONE
                    self.interleaving.append((fiber.fiber_id, "done"))
                    continue
                fiber.pending_result = None
                ticket = self.submit(*request)
                fiber.state = Fiber.WAITING
                fiber.waiting_ticket = ticket
                self.interleaving.append((fiber.fiber_id, f"wait:{ticket}"))
            done = self.poll_completions()
            for fiber in self._fibers:
                if fiber.state == Fiber.WAITING and fiber.waiting_ticket in done:
                    fiber.pending_result = done.pop(fiber.waiting_ticket)
                    fiber.waiting_ticket = None
                    fiber.state = Fiber.RUNNABLE
                    self.interleaving.append((fiber.fiber_id, "resume"))
            if not progressed:
                self.engine.kick()
        self._fibers.clear()


class IoEngine:
    def __init__(self, sandbox_dir, num_servers=2, ring_slots=DEFAULT_RING_SLOTS,
                 dispatcher_thread=True):
        os.makedirs(sandbox_dir, exist_ok=True)
        self.sandbox_dir = sandbox_dir
        self.ring_slots = ring_slots
        self.servers = [ServingThread(i, sandbox_dir)
                        for i in range(num_servers)]
        self.ports = {}              # cell_id -> CellPort
        self.bindings = {}           # cell_id -> ServingThread
        self._dispatch_lock = threading.Lock()
        self._dispatcher = None
        self._stop = threading.Event()
        self._use_dispatcher_thread = dispatcher_thread

    def start(self):
        if self._use_dispatcher_thread and self._dispatcher is None:
            self._stop.clear()
            self._dispatcher = threading.Thread(
                target=self._dispatch_loop, daemon=True, name="xcell-io-dispatcher")
            self._dispatcher.start()
        return self

    def stop(self):
        self._stop.set()
        if self._dispatcher is not None:
            self._dispatcher.join()
            self._dispatcher = None
        for cell_id in list(self.bindings):
            self.detach_cell(cell_id)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def attach_cell(self, cell_id, counters=None):
        if cell_id in self.bindings:
            raise AttachError(f"cell {cell_id} already attached")
        server = next((s for s in self.servers if s.cell_id is None), None)
        if server is None:
            raise AttachError("serving-thread pool exhausted")
        ring = SharedRing(self.ring_slots)
        port = CellPort(self, cell_id, ring, counters)
        server.bind(cell_id, ring, port.context)
        self.ports[cell_id] = port
        self.bindings[cell_id] = server
        return port

    def detach_cell(self, cell_id):
        server = self.bindings.pop(cell_id, None)
        if server is not None:
            server.unbind()
        self.ports.pop(cell_id, None)

    def sync_context(self, cell_id):
        port = self.ports[cell_id]
        server = self.bindings[cell_id]
        if server.replica.version != port.context.version:
            server.replica = port.context.snapshot()

    def poll_dispatch(self):
        """One dispatcher pass over all rings: SUBMITTED -> DISPATCHED,
        handing each message to its cell's exclusive server."""
        dispatched = 0
        with self._dispatch_lock:
            for cell_id, port in list(self.ports.items()):
                server = self.bindings.get(cell_id)
                if server is None:
                    continue
                ring = port.ring
                for slot in range(ring.slots):
                    if ring.status_of(slot) == Status.SUBMITTED:
                        msg = ring.read_slot(slot)
                        ring.set_status(slot, Status.DISPATCHED, msg.ticket)
                        server.inbox.put(slot)
                        dispatched += 1
        return dispatched

    def kick(self):
        """Run a dispatch pass inline when no dispatcher thread exists;
        otherwise give it a chance to run."""
        if self._dispatcher is None:
            self.poll_dispatch()
        else:
            import time
            time.sleep(0)

    def _dispatch_loop(self):
        import time
        while not self._stop.is_set():
            if self.poll_dispatch() == 0:
                time.sleep(0.0002)

    # -- audit ---------------------------------------------------------

    def audit_status_machine(self, cell_id):
        """Verify every slot's transition history follows the automaton."""
        ring = self.ports[cell_id].ring
        per_slot = {}
        for slot, ticket, old, new in ring.audit:
            expect = per_slot.get(slot, Status.FREE)
            if old != expect or (old, new) not in _VALID_TRANSITIONS:
                raise AssertionError(
                    f"slot {slot} ticket {ticket}: {old.name}->{new.name} "
                    f"after {expect.name}")
            per_slot[slot] = new
        return True

    def ticket_conservation(self, cell_id):
        port = self.ports[cell_id]
        return (port.tickets_issued
                == port.tickets_completed + port.tickets_failed
                + port.tickets_in_flight)
