import type { EventRecord, StreamEventName } from "./types";

export interface SseFrame {
  id?: string;
  event?: string;
  data?: string;
}

/** Incremental parser for text/event-stream bytes; frames may split anywhere. */
export class SseParser {
  private buffer = "";

  push(chunk: string, emit: (frame: SseFrame) => void): void {
    this.buffer += chunk;
    let end;
    while ((end = this.buffer.indexOf("\n\n")) >= 0) {
      const raw = this.buffer.slice(0, end);
      this.buffer = this.buffer.slice(end + 2);
      const frame: SseFrame = {};
      for (const line of raw.split("\n")) {
        if (!line || line.startsWith(":")) continue; // keepalive comment
        const sep = line.indexOf(": ");
        if (sep < 0) continue;
        const field = line.slice(0, sep);
        const value = line.slice(sep + 2);
        if (field === "id") frame.id = value;
        else if (field === "event") frame.event = value;
        else if (field === "data") frame.data = frame.data ? `${frame.data}\n${value}` : value;
      }
      if (frame.data !== undefined) emit(frame);
    }
  }
}

export interface StreamHandlers {
  onEvent(name: StreamEventName, record: EventRecord): void;
  onStatus(status: "live" | "connecting"): void;
}

/**
 * Live event subscription over fetch (EventSource cannot send the
 * Authorization header). Reconnects with Last-Event-ID so no event is missed.
 */
export class EventStream {
  private controller: AbortController | null = null;
  private stopped = false;
  lastEventId: number | null = null;

  constructor(
    private url: string,
    private token: string,
    private handlers: StreamHandlers,
    private fetchFn: typeof fetch = (...args) => fetch(...args),
    private reconnectDelayMs = 1000,
  ) {}

  start(): void {
    this.stopped = false;
    void this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }

  private async loop(): Promise<void> {
    while (!this.stopped) {
      this.handlers.onStatus("connecting");
      try {
        await this.connectOnce();
      } catch {
        // fall through to reconnect
      }
      if (this.stopped) return;
      await new Promise((resolve) => setTimeout(resolve, this.reconnectDelayMs));
    }
  }

  private async connectOnce(): Promise<void> {
    this.controller = new AbortController();
    const headers: Record<string, string> = { Authorization: `Bearer ${this.token}` };
    if (this.lastEventId !== null) headers["Last-Event-ID"] = String(this.lastEventId);
    const resp = await this.fetchFn(this.url, { headers, signal: this.controller.signal });
    if (!resp.ok || !resp.body) throw new Error(`stream status ${resp.status}`);
    this.handlers.onStatus("live");
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      parser.push(decoder.decode(value, { stream: true }), (frame) => {
        if (frame.id !== undefined) this.lastEventId = Number(frame.id);
        if (!frame.event || !frame.data) return;
        this.handlers.onEvent(
          frame.event as StreamEventName,
          JSON.parse(frame.data) as EventRecord,
        );
      });
    }
  }
}
