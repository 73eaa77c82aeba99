import { executeJob, MalformedJobError, validateJob } from './runner.js';

async function readStdin(): Promise<string> {
  const chunks: Buffer[] = [];
  for await (const chunk of process.stdin) {
    chunks.push(chunk as Buffer);
  }
  return Buffer.concat(chunks).toString('utf-8');
}

async function main(): Promise<number> {
  let job;
  try {
    job = validateJob(JSON.parse(await readStdin()));
  } catch (error) {
    const message = error instanceof Error ? error.message : String(error);
    process.stderr.write(`malformed job: ${message}\n`);
    return error instanceof MalformedJobError ? 2 : 1;
  }
  const results = await executeJob(job);
  process.stdout.write(JSON.stringify({ results }) + '\n');
  return 0;
}

main().then(
  (code) => process.exit(code),
  (error) => {
    process.stderr.write(`runner failure: ${error}\n`);
    process.exit(1);
  },
);
