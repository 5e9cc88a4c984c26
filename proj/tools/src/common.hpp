#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "commands.hpp"
#include "facecom/fitting.hpp"
#include "facecom/generator.hpp"
#include "facecom/guidance.hpp"

namespace facecom::cli {

void ensure_directory(const std::filesystem::path& dir);
void write_text(const std::filesystem::path& path, const std::string& text);
void require_file(const std::filesystem::path& path, const std::string& what);

FitConfig fit_config(const FitOptions& o);

// Provider for o.guidance; nullptr when guidance is off.
std::unique_ptr<GuidanceProvider> guidance_provider(const FitOptions& o, const GeneratorModel& model,
                                                    const TriMesh* ground_truth, const Camera& cam);

TriMesh mean_face(const GeneratorModel& model);

}  // namespace facecom::cli
