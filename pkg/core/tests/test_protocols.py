from django.test import SimpleTestCase

from core.exceptions import DuplicateRequest, ProtocolViolation
from core.protocols import PendingQueue, SteeringRequest
from core.registry import Urgency


def request(agent_id="a1", urgency=Urgency.MEDIUM, tick=1, *, blocking=True,
            question="Which option?", context=""):
    return SteeringRequest(
        agent_id=agent_id,
        context=context,
        question=question,
        blocking=blocking,
        urgency=urgency,
        issued_tick=tick,
    )


class SteeringRequestTestCase(SimpleTestCase):
    def test_empty_agent_rejected(self):
        with self.assertRaises(ProtocolViolation):
            request(agent_id="")

    def test_blank_question_rejected(self):
        with self.assertRaises(ProtocolViolation):
            request(question="   ")

    def test_as_record_uses_urgency_name(self):
        self.assertEqual(request(urgency=Urgency.HIGH).as_record()["urgency"], "HIGH")


class PendingQueueTestCase(SimpleTestCase):
    """Dequeue order: urgency desc, issued_tick asc, agent_id asc."""

    def test_order(self):
        queue = PendingQueue(
            [
                request("a3", Urgency.MEDIUM, 1),
                request("a1", Urgency.LOW, 0),
                request("a2", Urgency.HIGH, 5),
                request("a1", Urgency.MEDIUM, 1),
                request("a4", Urgency.MEDIUM, 0),
            ]
        )
        order = []
        while (req := queue.dequeue_next()) is not None:
            order.append((req.agent_id, req.urgency, req.issued_tick))
        self.assertEqual(
            order,
            [
                ("a2", Urgency.HIGH, 5),
                ("a4", Urgency.MEDIUM, 0),
                ("a1", Urgency.MEDIUM, 1),
                ("a3", Urgency.MEDIUM, 1),
                ("a1", Urgency.LOW, 0),
            ],
        )

    def test_empty_dequeue_is_none(self):
        self.assertIsNone(PendingQueue().dequeue_next())

    def test_duplicate_key_rejected(self):
        queue = PendingQueue([request("a1", tick=3)])
        with self.assertRaises(DuplicateRequest):
            queue.enqueue(request("a1", Urgency.HIGH, tick=3, question="Another?"))

    def test_dequeue_non_low_skips_low(self):
        queue = PendingQueue([request("a1", Urgency.LOW, 0), request("a2", Urgency.MEDIUM, 4)])
        self.assertEqual(queue.dequeue_non_low().agent_id, "a2")
        self.assertIsNone(queue.dequeue_non_low())
        self.assertEqual(len(queue), 1)


class FlushLowBatchTestCase(SimpleTestCase):
    def test_waits_below_size_and_age(self):
        queue = PendingQueue([request("a1", Urgency.LOW, 1), request("a2", Urgency.LOW, 2)])
        self.assertEqual(queue.flush_low_batch(3, batch_size=3, max_age=5), [])
        self.assertEqual(len(queue), 2)

    def test_flushes_at_batch_size(self):
        queue = PendingQueue(
            [request(f"a{i}", Urgency.LOW, 1) for i in range(1, 4)]
            + [request("a9", Urgency.HIGH, 1)]
        )
        batch = queue.flush_low_batch(1, batch_size=3, max_age=5)
        self.assertEqual([r.agent_id for r in batch], ["a1", "a2", "a3"])
        self.assertEqual([r.agent_id for r in queue], ["a9"])

    def test_flushes_at_max_age(self):
        queue = PendingQueue([request("a1", Urgency.LOW, 2)])
        self.assertEqual(queue.flush_low_batch(6, batch_size=3, max_age=5), [])
        self.assertEqual(len(queue.flush_low_batch(7, batch_size=3, max_age=5)), 1)

    def test_force(self):
        queue = PendingQueue([request("a1", Urgency.LOW, 2)])
        self.assertEqual(len(queue.flush_low_batch(2, force=True)), 1)

    def test_bad_parameters(self):
        with self.assertRaises(ValueError):
            PendingQueue().flush_low_batch(0, batch_size=0)
