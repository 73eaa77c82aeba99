import { spawn } from 'node:child_process';

export interface TestSpec {
  input: unknown;
  expected: unknown;
}

export interface RunnerJob {
  program: string;
  entry_point: string;
  tests: TestSpec[];
  timeout_ms: number;
}

export interface TestOutcome {
  passed: boolean;
  reason: 'ok' | 'wrong_output' | 'exception' | 'timeout';
  ms: number;
}

export class MalformedJobError extends Error {}

const MEMORY_LIMIT_BYTES = 512 * 1024 * 1024;

// Runs inside a fresh interpreter per test: compiles the candidate program
// into an empty namespace, calls the entry point, and reports the JSON
// round-tripped return value. Candidate stdout is swallowed so it cannot
// pollute the reply channel; every failure becomes {ok: false}.
const BOOTSTRAP = `
import io, json, resource, sys

payload = json.loads(sys.stdin.buffer.read().decode("utf-8"))
try:
    resource.setrlimit(resource.RLIMIT_AS, (${MEMORY_LIMIT_BYTES}, ${MEMORY_LIMIT_BYTES}))
except (ValueError, OSError):
    pass
real_stdout = sys.stdout
sys.stdout = io.StringIO()
try:
    namespace = {}
    exec(compile(payload["program"], "<candidate>", "exec"), namespace)
    fn = namespace[payload["entry_point"]]
    arg = payload["input"]
    value = fn(*arg) if isinstance(arg, list) else fn(arg)
    reply = json.dumps({"ok": True, "value": value}, allow_nan=False)
except BaseException as exc:
    reply = json.dumps({"ok": False, "error": type(exc).__name__ + ": " + str(exc)})
sys.stdout = real_stdout
print(reply)
`;

export function deepEqual(a: unknown, b: unknown): boolean {
  if (a === b) return true;
  if (Array.isArray(a) && Array.isArray(b)) {
    if (a.length !== b.length) return false;
    return a.every((item, i) => deepEqual(item, b[i]));
  }
  if (a !== null && b !== null && typeof a === 'object' && typeof b === 'object') {
    if (Array.isArray(a) || Array.isArray(b)) return false;
    const keysA = Object.keys(a as Record<string, unknown>).sort();
    const keysB = Object.keys(b as Record<string, unknown>).sort();
    if (keysA.length !== keysB.length) return false;
    return keysA.every(
      (key, i) =>
        key === keysB[i] &&
        deepEqual((a as Record<string, unknown>)[key], (b as Record<string, unknown>)[key]),
    );
  }
  return false;
}

export function runTest(
  program: string,
  entryPoint: string,
  test: TestSpec,
  timeoutMs: number,
  pythonBin = 'python3',
): Promise<TestOutcome> {
  const started = Date.now();
  return new Promise((resolve) => {
    const child = spawn(pythonBin, ['-c', BOOTSTRAP], { stdio: ['pipe', 'pipe', 'pipe'] });
    let stdout = '';
    let settled = false;

    const finish = (outcome: TestOutcome) => {
      if (settled) return;
      settled = true;
      clearTimeout(timer);
      resolve(outcome);
    };
    const timer = setTimeout(() => {
      child.kill('SIGKILL');
      finish({ passed: false, reason: 'timeout', ms: Date.now() - started });
    }, timeoutMs);

    child.stdout.on('data', (chunk) => {
      stdout += chunk;
    });
    child.stderr.resume();
    child.stdin.on('error', () => {
      /* child died before reading its job; close handler reports it */
    });
    child.on('error', () => finish({ passed: false, reason: 'exception', ms: Date.now() - started }));
    child.on('close', (code) => {
      const ms = Date.now() - started;
      if (code !== 0) {
        finish({ passed: false, reason: 'exception', ms });
        return;
      }
      try {
        const reply = JSON.parse(stdout);
        if (!reply.ok) {
          finish({ passed: false, reason: 'exception', ms });
          return;
        }
        const passed = deepEqual(reply.value, test.expected);
        finish({ passed, reason: passed ? 'ok' : 'wrong_output', ms });
      } catch {
        finish({ passed: false, reason: 'exception', ms });
      }
    });

    child.stdin.write(
      JSON.stringify({ program, entry_point: entryPoint, input: test.input }),
    );
    child.stdin.end();
  });
}

export function validateJob(raw: unknown): RunnerJob {
  if (typeof raw !== 'object' || raw === null || Array.isArray(raw)) {
    throw new MalformedJobError('job must be a JSON object');
  }
  const job = raw as Record<string, unknown>;
  if (typeof job.program !== 'string') {
    throw new MalformedJobError('job.program must be a string');
  }
  if (typeof job.entry_point !== 'string' || job.entry_point.length === 0) {
    throw new MalformedJobError('job.entry_point must be a non-empty string');
  }
  if (!Array.isArray(job.tests) || job.tests.length === 0) {
    throw new MalformedJobError('job.tests must be a non-empty array');
  }
  for (const test of job.tests) {
    if (
      typeof test !== 'object' ||
      test === null ||
      !('input' in (test as object)) ||
      !('expected' in (test as object))
    ) {
      throw new MalformedJobError('each test needs input and expected fields');
    }
  }
  if (!Number.isInteger(job.timeout_ms) || (job.timeout_ms as number) <= 0) {
    throw new MalformedJobError('job.timeout_ms must be a positive integer');
  }
  return job as unknown as RunnerJob;
}

export async function executeJob(
  job: RunnerJob,
  pythonBin = 'python3',
): Promise<TestOutcome[]> {
  const results: TestOutcome[] = [];
  for (const test of job.tests) {
    // Sequential, one fresh interpreter per test: a mutation or crash in one
    // test can never leak into the next.
    results.push(await runTest(job.program, job.entry_point, test, job.timeout_ms, pythonBin));
  }
  return results;
}
