import init, { simulate, checkRecord, sampleRecord, encodeFrame } from './pkg/fogline_demo.js';

const $ = (id) => document.getElementById(id);

function esc(s) {
  return String(s).replace(/[&<>]/g, (c) => ({ '&': '&amp;', '<': '&lt;', '>': '&gt;' })[c]);
}

function rowsTable(rows) {
  const body = rows
    .map((r) => `<tr><td>${esc(r.route_id_rta)}</td><td>${r.scheduled_trips}</td><td>${r.performed_trips}</td>` +
      `<td>${(r.percent_hundredths / 100).toFixed(2)}</td></tr>`)
    .join('');
  return `<table><tr><th>route</th><th>scheduled</th><th>performed</th><th>percent</th></tr>${body}</table>`;
}

function renderSim(res) {
  const t = res.totals;
  const reasons = Object.entries(t.deleted_by_reason).map(([k, v]) => `  ${k}: ${v}`).join('\n');
  const fogs = res.fogs
    .map((f) => `${f.fog_node}: ${f.tables_uploaded} tables uploaded, ${f.late_tuples} late, ` +
      `${f.replayed_packages} replayed packages`)
    .join('\n');
  const alarms = res.alarms.map((a) => JSON.stringify(a)).join('\n');
  return `${rowsTable(res.rows)}
<pre>${res.records} records (${res.defects} injected defects)
received ${t.received} = deleted ${t.deleted} + arrived ${t.arrived} + quarantined ${t.quarantined}
${esc(reasons)}
${esc(fogs)}</pre>
<p>${res.alarm_count} alarms${res.alarm_count > res.alarms.length ? `, first ${res.alarms.length}` : ''}:</p>
<pre>${esc(alarms)}</pre>`;
}

function runSim(ev) {
  ev.preventDefault();
  const params = {};
  for (const input of $('sim').querySelectorAll('input')) params[input.name] = Number(input.value);
  const started = performance.now();
  try {
    const res = JSON.parse(simulate(JSON.stringify(params)));
    $('sim-out').innerHTML = renderSim(res);
    $('sim-status').textContent = `${(performance.now() - started).toFixed(0)} ms`;
  } catch (e) {
    $('sim-out').innerHTML = `<p class="err">${esc(e)}</p>`;
    $('sim-status').textContent = '';
  }
}

function runCheck() {
  const verdict = JSON.parse(checkRecord($('record').value, Number($('slack').value)));
  $('record-out').textContent = JSON.stringify(verdict, null, 2);
}

function runFrame() {
  try {
    const f = JSON.parse(encodeFrame($('topic').value, Number($('seq').value), $('payload').value));
    $('frame-out').textContent = `${f.length} bytes\n${f.hex}\n\ndecoded: topic=${f.decoded_topic} ` +
      `seq=${f.decoded_seq} payload=${f.decoded_payload}`;
  } catch (e) {
    $('frame-out').textContent = `error: ${e}`;
  }
}

await init();
$('record').value = sampleRecord();
$('sim').addEventListener('submit', runSim);
$('check').addEventListener('click', runCheck);
$('frame').addEventListener('click', runFrame);
