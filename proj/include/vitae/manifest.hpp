#pragma once

#include <string>
#include <utility>
#include <vector>

namespace vitae {

std::string sha1_hex(const std::string& bytes);

// Git-style content id: sha1 over "blob <size>\0" + bytes.
std::string blob_hash_bytes(const std::string& bytes);
std::string blob_hash_file(const std::string& path);

// Record of one tool run: the command, every resolved setting, and a content
// hash per input file.  Written next to the outputs so a run can be repeated
// from the manifest alone.
struct Manifest {
    std::string command;
    std::vector<std::pair<std::string, std::string>> fields;
    std::vector<std::pair<std::string, std::string>> inputs;  // name -> blob hash
};

void manifest_set(Manifest& m, const std::string& key, const std::string& value);
void manifest_input(Manifest& m, const std::string& name, const std::string& path);

// Flat key=value lines: command, fields in insertion order, then
// input.<name>=<hash> lines.
std::string manifest_text(const Manifest& m);
void write_manifest(const Manifest& m, const std::string& path);

}  // namespace vitae
