#pragma once

// Event-stream parsing and prone/supine session slicing.

#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tte/time.hpp"

namespace tte::ingest {

enum class Position { prone, supine };
enum class Provenance { original, artificial };

std::string_view to_string(Position p);
std::string_view to_string(Provenance p);

struct PositionChange {
    Position position;
};

struct Measurement {
    std::string variable;
    double value;
};

struct MedicationRecord {
    std::string name;
    bool administered = true;
};

using Payload = std::variant<PositionChange, Measurement, MedicationRecord>;

struct Event {
    std::string patient_id;
    Instant timestamp;
    Payload payload;
    std::size_t line = 0;  // source line, 0 when constructed in code
};

struct PatientEvents {
    std::string patient_id;
    std::vector<Event> events;  // sorted by timestamp, stable w.r.t. input order
};

// Header names of the five input columns.
struct ColumnMapping {
    std::string patient_id = "patient_id";
    std::string timestamp = "timestamp";
    std::string kind = "kind";
    std::string name = "name";
    std::string value = "value";
};

struct ParseOptions {
    ColumnMapping columns;
    // Measurement variables considered known. Empty means every name is known.
    std::set<std::string> known_variables;
};

struct RecordError {
    std::size_t line;
    std::string message;
};

struct EventLog {
    std::vector<PatientEvents> patients;  // in order of first appearance
    std::vector<RecordError> errors;
    std::size_t out_of_order = 0;
    std::map<std::string, std::size_t> unknown_variables;

    std::size_t event_count() const;
};

// Malformed records are collected in EventLog::errors and skipped. A missing
// header column throws IoError. Empty input yields an empty log.
EventLog parse_events(std::istream& source, const ParseOptions& options = {});

struct Session {
    std::string patient_id;
    Instant start;
    Instant end;
    Position position;
    Provenance provenance = Provenance::original;
    Instant parent_end;  // equals end for original sessions

    Seconds duration() const { return end - start; }
    bool operator==(const Session&) const = default;
};

struct SessionSlices {
    std::vector<Session> sessions;
    std::size_t ignored_duplicates = 0;
};

// One original session per maximal interval of constant position. The timeline
// starts supine at the first event and ends at the patient's last event.
SessionSlices build_sessions(std::span<const Event> events);

struct BundleRule {
    std::vector<std::string> variables{"pao2", "peep", "fio2"};
    Seconds window = hours(1);
    Seconds margin = hours(8);
};

// Times at which every bundle variable was re-recorded inside `window`, within
// (session.start, session.end - margin]. Each measurement belongs to at most one
// bundle.
std::vector<Instant> bundle_times(const Session& session, std::span<const Event> events,
                                  const BundleRule& rule = {});

// Appends one artificial supine session [t, end] per qualifying bundle of every
// original supine session. Original sessions are returned unchanged, first.
std::vector<Session> spawn_artificial_sessions(std::span<const Session> sessions,
                                               std::span<const Event> events,
                                               const BundleRule& rule = {});

struct SessionCounts {
    std::size_t original_supine = 0;
    std::size_t artificial_supine = 0;
    std::size_t prone = 0;
    std::size_t supine() const { return original_supine + artificial_supine; }
};

SessionCounts count_sessions(std::span<const Session> sessions);

struct IngestResult {
    std::vector<Session> sessions;
    std::size_t ignored_duplicates = 0;
};

// build_sessions + spawn_artificial_sessions for every patient in the log.
IngestResult slice_all(const EventLog& log, const BundleRule& rule = {});

void write_sessions(std::ostream& out, std::span<const Session> sessions);
std::vector<Session> read_sessions(std::istream& in);

}  // namespace tte::ingest
