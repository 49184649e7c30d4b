// Client-side serialization of session requests: at most one in flight,
// later calls run strictly after earlier ones settle, in submission order.

export class RequestQueue {
  private tail: Promise<unknown> = Promise.resolve();
  private pending = 0;

  get size(): number {
    return this.pending;
  }

  enqueue<T>(task: () => Promise<T>): Promise<T> {
    this.pending += 1;
    const run = this.tail.then(task);
    this.tail = run.catch(() => undefined).finally(() => {
      this.pending -= 1;
    });
    return run;
  }
}
