#include "tte/ingest.hpp"

#include <algorithm>
#include <string>
#include <unordered_map>

#include "tte/csv.hpp"
#include "tte/error.hpp"

namespace tte::ingest {

std::string_view to_string(Position p) { return p == Position::prone ? "prone" : "supine"; }

std::string_view to_string(Provenance p) { return p == Provenance::original ? "original" : "artificial"; }

std::size_t EventLog::event_count() const {
    std::size_t n = 0;
    for (const auto& p : patients) n += p.events.size();
    return n;
}

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::optional<bool> parse_flag(std::string_view text) {
    const std::string v = lower(csv::trim(text));
    if (v.empty() || v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    return std::nullopt;
}

std::size_t column_index(const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (csv::trim(header[i]) == name) return i;
    throw IoError("events file: missing column '" + name + "'");
}

}  // namespace

EventLog parse_events(std::istream& source, const ParseOptions& options) {
    EventLog log;
    std::string line;
    std::size_t line_no = 0;

    // skip blank lines before the header
    std::vector<std::string> header;
    while (std::getline(source, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        header = csv::split_line(line);
        break;
    }
    if (header.empty()) return log;

    const auto& cols = options.columns;
    const std::size_t i_pid = column_index(header, cols.patient_id);
    const std::size_t i_ts = column_index(header, cols.timestamp);
    const std::size_t i_kind = column_index(header, cols.kind);
    const std::size_t i_name = column_index(header, cols.name);
    const std::size_t i_value = column_index(header, cols.value);
    const std::size_t needed = std::max({i_pid, i_ts, i_kind, i_name, i_value}) + 1;

    std::unordered_map<std::string, std::size_t> patient_slot;
    std::vector<Instant> last_seen;

    while (std::getline(source, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        auto fields = csv::split_line(line);
        if (fields.size() < needed) {
            log.errors.push_back({line_no, "expected at least " + std::to_string(needed) + " fields"});
            continue;
        }
        const std::string pid(csv::trim(fields[i_pid]));
        if (pid.empty()) {
            log.errors.push_back({line_no, "empty patient_id"});
            continue;
        }
        const auto ts = parse_iso8601(csv::trim(fields[i_ts]));
        if (!ts) {
            log.errors.push_back({line_no, "malformed timestamp '" + fields[i_ts] + "'"});
            continue;
        }
        const std::string kind = lower(csv::trim(fields[i_kind]));
        const std::string name(csv::trim(fields[i_name]));

        Event ev{pid, *ts, PositionChange{Position::supine}, line_no};
        if (kind == "position") {
            const std::string pos = lower(name);
            if (pos == "prone") {
                ev.payload = PositionChange{Position::prone};
            } else if (pos == "supine") {
                ev.payload = PositionChange{Position::supine};
            } else {
                log.errors.push_back({line_no, "unknown position '" + name + "'"});
                continue;
            }
        } else if (kind == "measurement") {
            const auto num = csv::parse_number(fields[i_value]);
            if (!num.ok || !num.finite) {
                log.errors.push_back({line_no, "non-numeric or non-finite value '" + fields[i_value] + "'"});
                continue;
            }
            const std::string var = lower(name);
            if (!options.known_variables.empty() && !options.known_variables.contains(var))
                ++log.unknown_variables[var];
            ev.payload = Measurement{var, num.value};
        } else if (kind == "medication") {
            const auto flag = parse_flag(fields[i_value]);
            if (!flag) {
                log.errors.push_back({line_no, "medication value must be a flag, got '" + fields[i_value] + "'"});
                continue;
            }
            ev.payload = MedicationRecord{lower(name), *flag};
        } else {
            log.errors.push_back({line_no, "unknown kind '" + fields[i_kind] + "'"});
            continue;
        }

        auto [it, inserted] = patient_slot.try_emplace(pid, log.patients.size());
        if (inserted) {
            log.patients.push_back({pid, {}});
            last_seen.push_back(ev.timestamp);
        } else if (ev.timestamp < last_seen[it->second]) {
            ++log.out_of_order;
        } else {
            last_seen[it->second] = ev.timestamp;
        }
        log.patients[it->second].events.push_back(std::move(ev));
    }

    for (auto& p : log.patients)
        std::stable_sort(p.events.begin(), p.events.end(),
                         [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
    return log;
}

SessionSlices build_sessions(std::span<const Event> events) {
    SessionSlices out;
    if (events.empty()) return out;

    const std::string& pid = events.front().patient_id;
    Position current = Position::supine;
    Instant open = events.front().timestamp;
    const Instant last = events.back().timestamp;

    auto close = [&](Instant at) {
        if (open < at) out.sessions.push_back({pid, open, at, current, Provenance::original, at});
    };

    for (const auto& ev : events) {
        const auto* change = std::get_if<PositionChange>(&ev.payload);
        if (!change) continue;
        if (change->position == current) {
            ++out.ignored_duplicates;
            continue;
        }
        close(ev.timestamp);
        current = change->position;
        open = ev.timestamp;
    }
    close(last);
    return out;
}

std::vector<Instant> bundle_times(const Session& session, std::span<const Event> events, const BundleRule& rule) {
    std::vector<Instant> out;
    if (session.end - session.start < rule.margin) return out;
    const Instant latest = session.end - rule.margin;

    std::vector<std::optional<Instant>> seen(rule.variables.size());
    for (const auto& ev : events) {
        if (ev.timestamp <= session.start) continue;
        if (ev.timestamp > latest) break;
        const auto* m = std::get_if<Measurement>(&ev.payload);
        if (!m) continue;
        auto it = std::find(rule.variables.begin(), rule.variables.end(), m->variable);
        if (it == rule.variables.end()) continue;
        seen[static_cast<std::size_t>(it - rule.variables.begin())] = ev.timestamp;

        if (std::any_of(seen.begin(), seen.end(), [](const auto& s) { return !s.has_value(); })) continue;
        Instant earliest = ev.timestamp;
        for (const auto& s : seen) earliest = std::min(earliest, *s);
        if (ev.timestamp - earliest <= rule.window) {
            out.push_back(ev.timestamp);
            std::fill(seen.begin(), seen.end(), std::nullopt);
        }
    }
    return out;
}

std::vector<Session> spawn_artificial_sessions(std::span<const Session> sessions, std::span<const Event> events,
                                               const BundleRule& rule) {
    std::vector<Session> out(sessions.begin(), sessions.end());
    for (const auto& s : sessions) {
        if (s.provenance != Provenance::original || s.position != Position::supine) continue;
        for (Instant t : bundle_times(s, events, rule))
            out.push_back({s.patient_id, t, s.end, Position::supine, Provenance::artificial, s.end});
    }
    return out;
}

SessionCounts count_sessions(std::span<const Session> sessions) {
    SessionCounts c;
    for (const auto& s : sessions) {
        if (s.position == Position::prone)
            ++c.prone;
        else if (s.provenance == Provenance::original)
            ++c.original_supine;
        else
            ++c.artificial_supine;
    }
    return c;
}

IngestResult slice_all(const EventLog& log, const BundleRule& rule) {
    IngestResult result;
    for (const auto& patient : log.patients) {
        auto slices = build_sessions(patient.events);
        result.ignored_duplicates += slices.ignored_duplicates;
        auto all = spawn_artificial_sessions(slices.sessions, patient.events, rule);
        result.sessions.insert(result.sessions.end(), all.begin(), all.end());
    }
    return result;
}

void write_sessions(std::ostream& out, std::span<const Session> sessions) {
    csv::write_row(out, {"patient_id", "start", "end", "position", "provenance"});
    for (const auto& s : sessions)
        csv::write_row(out, {s.patient_id, format_iso8601(s.start), format_iso8601(s.end),
                             std::string(to_string(s.position)), std::string(to_string(s.provenance))});
}

std::vector<Session> read_sessions(std::istream& in) {
    std::vector<Session> out;
    std::string line;
    std::size_t line_no = 0;
    bool header = true;
    while (std::getline(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        auto f = csv::split_line(line);
        if (f.size() < 5) throw IoError("sessions file line " + std::to_string(line_no) + ": expected 5 fields");
        auto start = parse_iso8601(csv::trim(f[1]));
        auto end = parse_iso8601(csv::trim(f[2]));
        if (!start || !end) throw IoError("sessions file line " + std::to_string(line_no) + ": bad timestamp");
        Session s{f[0], *start, *end, Position::supine, Provenance::original, *end};
        if (csv::trim(f[3]) == "prone")
            s.position = Position::prone;
        else if (csv::trim(f[3]) != "supine")
            throw IoError("sessions file line " + std::to_string(line_no) + ": bad position");
        if (csv::trim(f[4]) == "artificial")
            s.provenance = Provenance::artificial;
        else if (csv::trim(f[4]) != "original")
            throw IoError("sessions file line " + std::to_string(line_no) + ": bad provenance");
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace tte::ingest
