#pragma once

#include <stdexcept>
#include <string>

namespace p2w {

// Base class for every error thrown by this library.  Catching p2w::Error
// is enough to contain anything that can go wrong below the CLI layer.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller broke an API precondition (shape mismatch, bad range, graph cycle).
struct ContractViolation : Error {
    explicit ContractViolation(const std::string& msg) : Error("contract violation: " + msg) {}
};

// An embedding row had (near-)zero norm where a unit vector was required.
struct DegenerateEmbedding : Error {
    explicit DegenerateEmbedding(const std::string& msg) : Error("degenerate embedding: " + msg) {}
};

// A prompt contains the pseudo-token slot but no pseudo vector was supplied.
struct MissingPseudoVector : Error {
    explicit MissingPseudoVector(const std::string& msg) : Error("missing pseudo vector: " + msg) {}
};

// A word is not in the closed vocabulary.
struct UnknownToken : Error {
    explicit UnknownToken(const std::string& msg) : Error("unknown token: " + msg) {}
};

// A rendered token sequence does not fit the fixed context length.
struct SequenceTooLong : Error {
    explicit SequenceTooLong(const std::string& msg) : Error("sequence too long: " + msg) {}
};

// A file is not in the expected on-disk format at all (bad magic / wrong kind).
struct UnsupportedFormat : Error {
    explicit UnsupportedFormat(const std::string& msg) : Error("unsupported format: " + msg) {}
};

// A file has the right magic but is truncated or internally inconsistent.
struct CorruptCheckpoint : Error {
    explicit CorruptCheckpoint(const std::string& msg) : Error("corrupt checkpoint: " + msg) {}
};

// An artifact on disk does not match the config that is asking for it,
// or an upstream artifact required by a pipeline stage is absent.
struct StaleArtifact : Error {
    explicit StaleArtifact(const std::string& msg) : Error("stale artifact: " + msg) {}
};

} // namespace p2w
