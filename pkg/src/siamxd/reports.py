"""Text serialisations for run histories and summary tables.

records.tsv  one metric per line: ``run_id  fold  epoch  metric  value``.
             Per-epoch training losses use the epoch index; evaluation
             metrics use the epoch field ``final``. Values are written with
             ``repr`` so they round-trip exactly.
summary.csv  ``method,mask,n,k,metric,mean,ci95,formatted``
ablation.csv ``mask,mean_acc,ci_acc,mean_f1,ci_f1``
sweep.csv    ``n,mean_acc,ci_acc,mean_f1,ci_f1``
"""
import csv
import io

RECORD_FIELDS = ("run_id", "fold", "epoch", "metric", "value")
SUMMARY_FIELDS = ("method", "mask", "n", "k", "metric", "mean", "ci95", "formatted")
ABLATION_FIELDS = ("mask", "mean_acc", "ci_acc", "mean_f1", "ci_f1")
SWEEP_FIELDS = ("n", "mean_acc", "ci_acc", "mean_f1", "ci_f1")

LOSS_METRICS = ("l_c", "l_cp", "l_cd", "l_overall")


def _num(x):
    return f"{x:.6f}"


def fold_records(run_id, folds):
    lines = []
    for f in folds:
        for epoch, h in enumerate(f.history):
            for metric in LOSS_METRICS:
                lines.append((run_id, f.fold, epoch, metric, repr(getattr(h, metric))))
        if f.error:
            lines.append((run_id, f.fold, "final", "error", f.error.replace("\t", " ").replace("\n", " ")))
        else:
            lines.append((run_id, f.fold, "final", "accuracy", repr(f.accuracy)))
            lines.append((run_id, f.fold, "final", "f1", repr(f.f1)))
    return lines


def records_text(lines):
    out = ["\t".join(RECORD_FIELDS)]
    out += ["\t".join(str(v) for v in rec) for rec in lines]
    return "\n".join(out) + "\n"


def parse_records(text):
    rows = text.splitlines()
    if not rows or tuple(rows[0].split("\t")) != RECORD_FIELDS:
        raise ValueError("not a records file")
    return [dict(zip(RECORD_FIELDS, r.split("\t"))) for r in rows[1:] if r]


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def summary_csv(method, mask, n, report):
    rows = [
        (method, mask, n, report.k, "accuracy", _num(report.mean_accuracy), _num(report.ci95_accuracy),
         report.accuracy_str()),
        (method, mask, n, report.k, "f1", _num(report.mean_f1), _num(report.ci95_f1), report.f1_str()),
    ]
    return _csv(SUMMARY_FIELDS, rows)


def ablation_csv(table):
    rows = [(mask, _num(r.mean_accuracy), _num(r.ci95_accuracy), _num(r.mean_f1), _num(r.ci95_f1))
            for mask, r in table.items()]
    return _csv(ABLATION_FIELDS, rows)


def sweep_csv(curve):
    rows = [(n, _num(r.mean_accuracy), _num(r.ci95_accuracy), _num(r.mean_f1), _num(r.ci95_f1))
            for n, r in curve]
    return _csv(SWEEP_FIELDS, rows)
